import json
import logging
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mergeforge.core.exceptions import (
    ArtifactKindError,
    BadMagicError,
    CheckpointError,
    CheckpointNotFoundError,
    DataError,
    SpecHashMismatchError,
    StructuralError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from mergeforge.models.dataset import DatasetSplit, Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import Layer, MergeWeights, ParameterSet, TaskVector
from mergeforge.schemas.checkpoint import (
    ArtifactKind,
    CheckpointHeader,
    CheckpointSummary,
    DTypeCode,
    LayerEntry,
)
from mergeforge.utils.rng import keyed_generator

logger = logging.getLogger(__name__)

MAGIC = b"MRGFORG1"
FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt"
SPLIT_NAMES = ("train", "validation", "test")

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DTYPES = {
    DTypeCode.FLOAT32: np.dtype("<f4"),
    DTypeCode.FLOAT64: np.dtype("<f8"),
}

PathLike = Union[str, Path]


class _Reader:
    """Cursor over checkpoint bytes; running past the end is a truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, layer_index: Optional[int] = None) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedCheckpointError("Checkpoint file is truncated", layer_index)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, layer_index: Optional[int] = None) -> int:
        return fmt.unpack(self.take(fmt.size, layer_index))[0]

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.data)


def _encode(
    kind: ArtifactKind,
    spec_hash: bytes,
    metadata: Dict[str, Any],
    layers: Sequence[Tuple[str, np.ndarray, DTypeCode]],
) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U32.pack(int(kind)),
        spec_hash,
        _U32.pack(len(layers)),
        _U32.pack(len(meta)),
        meta,
    ]
    for name, values, code in layers:
        encoded_name = name.encode("utf-8")
        data = np.ascontiguousarray(values, dtype=_DTYPES[code]).reshape(-1)
        parts.extend([
            _U32.pack(len(encoded_name)),
            encoded_name,
            _U8.pack(int(code)),
            _U64.pack(data.size),
            data.tobytes(),
        ])
    return b"".join(parts)


def _decode(data: bytes, with_values: bool = True) -> Tuple[CheckpointHeader, List[Layer]]:
    reader = _Reader(data)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"Not a mergeforge checkpoint (magic {magic!r})")
    version = reader.unpack(_U32)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"Checkpoint format version {version}, expected {FORMAT_VERSION}")
    kind_code = reader.unpack(_U32)
    try:
        kind = ArtifactKind(kind_code)
    except ValueError as exc:
        raise ArtifactKindError(f"Unknown artifact kind {kind_code}") from exc
    spec_hash = reader.take(32)
    layer_count = reader.unpack(_U32)
    meta_length = reader.unpack(_U32)
    try:
        metadata = json.loads(reader.take(meta_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Checkpoint metadata is corrupt: {exc}") from exc

    entries: List[LayerEntry] = []
    layers: List[Layer] = []
    for index in range(layer_count):
        name_length = reader.unpack(_U32, index)
        name = reader.take(name_length, index).decode("utf-8")
        code_value = reader.unpack(_U8, index)
        try:
            code = DTypeCode(code_value)
        except ValueError as exc:
            raise CheckpointError(f"Layer {index} has unknown dtype code {code_value}") from exc
        count = reader.unpack(_U64, index)
        dtype = _DTYPES[code]
        raw = reader.take(count * dtype.itemsize, index)
        entries.append(LayerEntry(name=name, dtype=dtype.name, count=count))
        if with_values:
            values = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))
            layers.append(Layer(name, values))

    if not reader.exhausted:
        raise CheckpointError("Checkpoint has trailing bytes after the last layer")

    header = CheckpointHeader(
        magic=MAGIC.decode("ascii"),
        version=version,
        kind=kind.name.lower(),
        spec_hash=spec_hash.hex(),
        layer_count=layer_count,
        metadata=metadata,
        layers=entries,
        file_size=len(data),
    )
    return header, layers


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"Checkpoint not found: {path}")
    return path.read_bytes()


def _write_atomic(path: PathLike, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _check_artifact(header: CheckpointHeader, kind: ArtifactKind, spec: ModelSpec, path: PathLike) -> None:
    if header.kind != kind.name.lower():
        raise ArtifactKindError(f"{path} holds a {header.kind} artifact, expected {kind.name.lower()}")
    if header.spec_hash != spec.spec_id:
        raise SpecHashMismatchError(f"{path} was written for a different ModelSpec")


def _check_layer_names(layers: Sequence[Layer], spec: ModelSpec, path: PathLike) -> None:
    if [layer.name for layer in layers] != spec.layer_names:
        raise StructuralError(f"{path} layer names do not match the ModelSpec")


class CheckpointService:
    """Bit-exact persistence of parameters, task vectors, merge weights and datasets."""

    @staticmethod
    def save_params(params: ParameterSet, path: PathLike) -> None:
        layers = [(layer.name, layer.values, DTypeCode.FLOAT32) for layer in params.layers]
        _write_atomic(path, _encode(ArtifactKind.PARAMS, bytes.fromhex(params.spec_id), {}, layers))
        logger.debug("saved parameters to %s", path)

    @staticmethod
    def load_params(path: PathLike, spec: ModelSpec) -> ParameterSet:
        header, layers = _decode(_read_bytes(path))
        _check_artifact(header, ArtifactKind.PARAMS, spec, path)
        _check_layer_names(layers, spec, path)
        return ParameterSet.from_arrays(spec, [layer.values for layer in layers])

    @staticmethod
    def save_task_vector(task_vector: TaskVector, path: PathLike) -> None:
        layers = [(layer.name, layer.values, DTypeCode.FLOAT64) for layer in task_vector.layers]
        metadata = {"source_task": task_vector.source_task}
        _write_atomic(path, _encode(ArtifactKind.TASK_VECTOR, bytes.fromhex(task_vector.spec_id), metadata, layers))

    @staticmethod
    def load_task_vector(path: PathLike, spec: ModelSpec) -> TaskVector:
        header, layers = _decode(_read_bytes(path))
        _check_artifact(header, ArtifactKind.TASK_VECTOR, spec, path)
        _check_layer_names(layers, spec, path)
        return TaskVector.from_arrays(
            spec, [layer.values for layer in layers], source_task=header.metadata.get("source_task", "")
        )

    @staticmethod
    def save_merge_weights(weights: MergeWeights, path: PathLike, spec: ModelSpec) -> None:
        """One float64 row per merged model; layer names travel in the metadata."""
        if list(weights.layer_names) != spec.layer_names:
            raise StructuralError("MergeWeights columns do not match the ModelSpec layers")
        layers = [(model_id, weights.w[i], DTypeCode.FLOAT64) for i, model_id in enumerate(weights.model_ids)]
        metadata = {"model_ids": list(weights.model_ids), "layer_names": list(weights.layer_names)}
        _write_atomic(path, _encode(ArtifactKind.MERGE_WEIGHTS, spec.spec_hash, metadata, layers))

    @staticmethod
    def load_merge_weights(path: PathLike, spec: ModelSpec) -> MergeWeights:
        header, layers = _decode(_read_bytes(path))
        _check_artifact(header, ArtifactKind.MERGE_WEIGHTS, spec, path)
        layer_names = header.metadata.get("layer_names", [])
        if layer_names != spec.layer_names:
            raise StructuralError(f"{path} merge weights do not match the ModelSpec layers")
        rows = [layer.values for layer in layers]
        w = np.stack(rows) if rows else np.zeros((0, len(layer_names)))
        return MergeWeights(w=w, model_ids=tuple(layer.name for layer in layers), layer_names=tuple(layer_names))

    @staticmethod
    def inspect_header(path: PathLike) -> CheckpointHeader:
        header, _ = _decode(_read_bytes(path), with_values=False)
        return header

    @staticmethod
    def read_layers(path: PathLike) -> Tuple[CheckpointHeader, List[Layer]]:
        """Header and raw layers of any checkpoint, without checking a ModelSpec."""
        return _decode(_read_bytes(path))

    @staticmethod
    def list_checkpoints(directory: PathLike) -> List[CheckpointSummary]:
        directory = Path(directory)
        if not directory.is_dir():
            return []
        summaries = []
        for path in sorted(directory.rglob(f"*{CHECKPOINT_SUFFIX}")):
            try:
                header = CheckpointService.inspect_header(path)
            except CheckpointError as exc:
                logger.warning("skipping unreadable checkpoint %s: %s", path, exc)
                continue
            summaries.append(CheckpointSummary(
                name=path.relative_to(directory).as_posix(),
                kind=header.kind,
                layer_count=header.layer_count,
                file_size=header.file_size,
            ))
        return summaries

    @staticmethod
    def split_validation(
        examples: Examples, fraction: float, seed: int, task_name: str = ""
    ) -> Tuple[Examples, Examples]:
        """
        Carve a validation split out of training examples.

        |validation| = round(fraction * n) (half up), kept within [1, n - 1].
        Membership depends only on (seed, task_name).
        """
        if not 0.0 < fraction < 1.0:
            raise DataError(f"Validation fraction must lie in (0, 1), got {fraction}")
        n = len(examples)
        if n < 2:
            raise DataError("Need at least two examples to carve a validation split")
        n_validation = min(max(int(math.floor(fraction * n + 0.5)), 1), n - 1)
        order = keyed_generator(seed, "validation-split", task_name).permutation(n)
        validation_index = np.sort(order[:n_validation])
        train_index = np.sort(order[n_validation:])
        return examples.subset(train_index), examples.subset(validation_index)

    @staticmethod
    def save_dataset(split: DatasetSplit, directory: PathLike) -> None:
        """One JSONL file per split ({"id", "x", "y"} per line) plus meta.json."""
        directory = Path(directory)
        meta = {
            "task_name": split.task_name,
            "input_dim": split.input_dim,
            "num_classes": split.num_classes,
            "sizes": {name: len(getattr(split, name)) for name in SPLIT_NAMES},
        }
        _write_atomic(directory / "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        for name in SPLIT_NAMES:
            part: Examples = getattr(split, name)
            lines = [
                json.dumps({"id": int(i), "x": x, "y": int(y)})
                for i, x, y in zip(part.ids, part.inputs.astype(np.float64).tolist(), part.labels)
            ]
            _write_atomic(directory / f"{name}.jsonl", "".join(line + "\n" for line in lines).encode("utf-8"))

    @staticmethod
    def load_dataset(directory: PathLike, seed: int = 0, validation_fraction: float = 0.1) -> DatasetSplit:
        """Read a dataset directory; a missing validation file is carved out of train."""
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.is_file():
            raise DataError(f"Dataset directory {directory} has no meta.json")
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            task_name = meta["task_name"]
            input_dim = int(meta["input_dim"])
            num_classes = int(meta["num_classes"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Invalid dataset metadata in {meta_path}: {exc}") from exc

        parts: Dict[str, Examples] = {}
        for name in SPLIT_NAMES:
            path = directory / f"{name}.jsonl"
            if path.is_file():
                parts[name] = _read_jsonl(path, input_dim)
        if "train" not in parts or "test" not in parts:
            raise DataError(f"Dataset {directory} needs train.jsonl and test.jsonl")
        if "validation" not in parts or len(parts["validation"]) == 0:
            logger.info("carving validation split for task %s", task_name)
            parts["train"], parts["validation"] = CheckpointService.split_validation(
                parts["train"], validation_fraction, seed, task_name
            )

        return DatasetSplit(
            task_name=task_name,
            input_dim=input_dim,
            num_classes=num_classes,
            train=parts["train"],
            validation=parts["validation"],
            test=parts["test"],
        )


def _read_jsonl(path: Path, input_dim: int) -> Examples:
    ids: List[int] = []
    inputs: List[List[float]] = []
    labels: List[int] = []
    with path.open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                ids.append(int(record.get("id", len(ids))))
                inputs.append([float(v) for v in record["x"]])
                labels.append(int(record["y"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_number}: bad record ({exc})") from exc
            if len(inputs[-1]) != input_dim:
                raise DataError(f"{path}:{line_number}: expected {input_dim} features, got {len(inputs[-1])}")
    if not inputs:
        return Examples.empty(input_dim)
    return Examples(ids=np.array(ids), inputs=np.array(inputs, dtype=np.float32), labels=np.array(labels))
