"""Load YAML/JSON documents while remembering the source line of every node.

Validation code reports problems as ``file:line: message``; this module keeps
the mapping from a key path (tuple of keys and list indices) to a 1-based line.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .errors import ValidationError


class SourceMap:
    def __init__(self, name: str, lines: dict | None = None):
        self.name = name
        self.lines = lines or {}

    def where(self, *path) -> str:
        """Best location for ``path``: the deepest prefix that has a line."""
        path = tuple(path)
        while path:
            if path in self.lines:
                return f"{self.name}:{self.lines[path]}"
            path = path[:-1]
        return self.name

    def sub(self, *prefix) -> "SourceMap":
        n = len(prefix)
        lines = {p[n:]: ln for p, ln in self.lines.items() if p[:n] == tuple(prefix)}
        return SourceMap(self.name, lines)


def _walk(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            lines[path + (key,)] = knode.start_mark.line + 1
            out[key] = _walk(vnode, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_walk(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.constructor.SafeConstructor().construct_object(node, deep=True)


def parse_document(text: str, name: str = "<document>"):
    """Parse YAML (a superset of JSON) and return ``(data, SourceMap)``."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{name}:{mark.line + 1}" if mark is not None else name
        raise ValidationError(f"malformed document ({getattr(exc, 'problem', exc)})", loc) from exc
    if node is None:
        raise ValidationError("empty document", name)
    lines: dict = {}
    data = _walk(node, (), lines)
    return data, SourceMap(name, lines)


def read_document(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read document: {exc.strerror}", str(path)) from exc
    return parse_document(text, str(path))
