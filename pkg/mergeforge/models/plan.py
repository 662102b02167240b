from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from mergeforge.core.exceptions import StructuralError


@dataclass(frozen=True)
class PlanNode:
    """
    Node of a merge tree.

    Leaves reference one fine-tuned model by task name; internal nodes list
    at least two children.
    """
    task: Optional[str] = None
    children: Tuple["PlanNode", ...] = field(default_factory=tuple)

    @property
    def is_leaf(self) -> bool:
        return self.task is not None

    @property
    def covered_tasks(self) -> Tuple[str, ...]:
        if self.is_leaf:
            return (self.task,)
        covered: List[str] = []
        for child in self.children:
            covered.extend(child.covered_tasks)
        return tuple(covered)

    @property
    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(child.depth for child in self.children)

    def to_nested(self) -> Any:
        if self.is_leaf:
            return self.task
        return [child.to_nested() for child in self.children]

    @classmethod
    def from_nested(cls, nested: Any) -> "PlanNode":
        if isinstance(nested, str):
            return cls(task=nested)
        if isinstance(nested, (list, tuple)):
            return cls(children=tuple(cls.from_nested(item) for item in nested))
        raise StructuralError(f"Plan entries must be task names or lists, got {type(nested).__name__}")


@dataclass(frozen=True)
class MergePlan:
    """A merge tree with a fan-in bound on every internal node."""
    root: PlanNode
    fan_in_limit: int = 2

    @classmethod
    def from_nested(cls, nested: Any, fan_in_limit: int) -> "MergePlan":
        root = PlanNode.from_nested(nested)
        if root.is_leaf:
            root = PlanNode(children=(root,))
        plan = cls(root=root, fan_in_limit=fan_in_limit)
        plan.validate()
        return plan

    def to_nested(self) -> Any:
        return self.root.to_nested()

    @property
    def tasks(self) -> Tuple[str, ...]:
        return self.root.covered_tasks

    def validate(self, task_names: Optional[Iterable[str]] = None) -> None:
        if self.fan_in_limit < 2:
            raise StructuralError("fan_in_limit must be at least 2")
        if self.root.is_leaf:
            raise StructuralError("Plan root must be an internal node")

        for path, node in self.walk():
            if node.is_leaf:
                continue
            if len(node.children) > self.fan_in_limit:
                raise StructuralError(
                    f"Node '{path}' has {len(node.children)} children, fan-in limit is {self.fan_in_limit}"
                )
            if len(node.children) < 2 and node is not self.root:
                raise StructuralError(f"Internal node '{path}' needs at least two children")

        tasks = self.tasks
        if len(tasks) != len(set(tasks)):
            raise StructuralError("A fine-tuned model appears in more than one leaf")
        if task_names is not None and set(tasks) != set(task_names):
            missing = sorted(set(task_names) - set(tasks))
            extra = sorted(set(tasks) - set(task_names))
            raise StructuralError(f"Plan does not cover the provided models (missing {missing}, unknown {extra})")

    def walk(self) -> Iterator[Tuple[str, PlanNode]]:
        """Pre-order traversal yielding (path, node); the root's path is 'root'."""
        stack: List[Tuple[str, PlanNode]] = [("root", self.root)]
        while stack:
            path, node = stack.pop()
            yield path, node
            for index in reversed(range(len(node.children))):
                stack.append((f"{path}/{index}", node.children[index]))

    def internal_nodes_bottom_up(self) -> List[Tuple[str, PlanNode]]:
        """Internal nodes level by level from the deepest level up (breadth-first per level)."""
        levels: Dict[int, List[Tuple[str, PlanNode]]] = {}
        for path, node in self.walk():
            if not node.is_leaf:
                levels.setdefault(node.depth, []).append((path, node))
        ordered: List[Tuple[str, PlanNode]] = []
        for depth in sorted(levels):
            ordered.extend(sorted(levels[depth], key=lambda item: _path_key(item[0])))
        return ordered


def _path_key(path: str) -> Sequence[int]:
    return [int(part) for part in path.split("/")[1:]]
