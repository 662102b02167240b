"""
Tests package initialization.

Test modules are organized by service and use pytest for execution.
"""
