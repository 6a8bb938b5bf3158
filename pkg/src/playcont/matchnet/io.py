"""``PMN1`` model files.

The header carries every :class:`MatchNetConfig` field as ``key=value``
text. Parameter blocks follow in the order of
:func:`~playcont.matchnet.network.parameter_shapes`: for each ``f`` block
``W, b, gamma, beta, mean, var``, then ``g.W1, g.b1, g.gamma, g.beta,
g.mean, g.var, g.W2, g.b2``. Extra ``meta.*`` header keys hold run
information and are ignored on load.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .. import _container
from .._container import ModelFormatError, ShapeError
from .network import INFERENCE, MatchNet, MatchNetConfig, parameter_shapes

MAGIC = b"PMN1"


def _parse_field(kind, text: str):
    if kind in (bool, "bool"):
        if text not in ("True", "False"):
            raise ModelFormatError(f"bad boolean {text!r}")
        return text == "True"
    if kind in (int, "int"):
        return int(text)
    return float(text)


def dumps(net: MatchNet, meta: dict | None = None) -> bytes:
    header = {k: repr(v) if isinstance(v, float) else str(v) for k, v in net.config.to_dict().items()}
    for key, value in (meta or {}).items():
        header[f"meta.{key}"] = str(value)
    return _container.dump(MAGIC, header, list(net.params.items()))


def loads(data: bytes, expected_input_dim: int | None = None) -> MatchNet:
    header, blocks = _container.load(data, MAGIC)
    kwargs = {}
    for f in fields(MatchNetConfig):
        if f.name not in header:
            raise ModelFormatError(f"header is missing config field {f.name!r}")
        try:
            kwargs[f.name] = _parse_field(f.type, header[f.name])
        except ValueError:
            raise ModelFormatError(f"bad value for {f.name!r}: {header[f.name]!r}") from None
    config = MatchNetConfig(**kwargs)
    if expected_input_dim is not None and config.input_dim != expected_input_dim:
        raise ShapeError(
            f"model expects {config.input_dim}-dimensional features, got {expected_input_dim}"
        )
    shapes = parameter_shapes(config)
    if list(blocks) != list(shapes):
        raise ShapeError("parameter blocks do not match the configuration")
    for name, shape in shapes.items():
        if blocks[name].shape != shape:
            raise ShapeError(f"{name} has shape {blocks[name].shape}, expected {shape}")
    return MatchNet(config, dict(blocks), INFERENCE)


def save(net: MatchNet, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(net, meta))


def load(path, expected_input_dim: int | None = None) -> MatchNet:
    return loads(Path(path).read_bytes(), expected_input_dim)


def read_meta(path) -> dict:
    header, _ = _container.load(Path(path).read_bytes(), MAGIC)
    return {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
