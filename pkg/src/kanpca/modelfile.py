"""Single-file model format shared by KAN-PCA and PCA models.

Layout::

    KANPCA-MODEL
    format_version = 1
    kind = kan_pca
    architecture = 20,10,3,20
    ...
    block encoder.0.w_b 10,20
    block decoder 20,3
    end_header
    <raw little-endian float64 data of every block, in header order>

Header lines are ``key = value`` pairs or ``block <name> <shape>``
declarations; shapes are comma-separated (empty for scalars). Writing is
deterministic: identical models give identical bytes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .kan import AFFINE, KanLayer
from .linalg import PcaModel
from .pipeline import Standardization
from .splines import KnotVector
from .train import KanPcaModel

MAGIC = "KANPCA-MODEL"
FORMAT_VERSION = 1
END = "end_header"
_DTYPE = np.dtype("<f8")


@dataclass
class ModelFile:
    header: dict
    blocks: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header["kind"]


def _shape_str(shape) -> str:
    return ",".join(str(int(s)) for s in shape)


def _parse_shape(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",") if s)


def write_model_file(path, header: dict, blocks: dict):
    lines = [MAGIC, f"format_version = {FORMAT_VERSION}"]
    for key, value in header.items():
        if "\n" in str(value) or key.startswith("block"):
            raise ValueError(f"invalid header entry {key!r}")
        lines.append(f"{key} = {value}")
    payload = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPE)
        lines.append(f"block {name} {_shape_str(arr.shape)}")
        payload.append(arr.tobytes())
    lines.append(END)
    data = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(payload)
    Path(path).write_bytes(data)


def read_model_file(path) -> ModelFile:
    raw = Path(path).read_bytes()
    marker = ("\n" + END + "\n").encode("utf-8")
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise DataError(f"{path}: not a kanpca model file")
    text = raw[:cut].decode("utf-8").split("\n")
    body = raw[cut + len(marker):]
    header, decl = {}, []
    for line in text[1:]:
        if line.startswith("block "):
            _, name, *shape = line.split(" ")
            decl.append((name, _parse_shape(shape[0] if shape else "")))
        elif " = " in line:
            key, value = line.split(" = ", 1)
            header[key] = value
        elif line:
            raise DataError(f"{path}: malformed header line {line!r}")
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    blocks, offset = {}, 0
    for name, shape in decl:
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * _DTYPE.itemsize
        if offset + nbytes > len(body):
            raise DataError(f"{path}: truncated block {name!r}")
        blocks[name] = np.frombuffer(body, _DTYPE, size, offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise DataError(f"{path}: {len(body) - offset} trailing bytes after the last block")
    header.pop("format_version")
    return ModelFile(header, blocks)


def _common(header, blocks, standardization, tickers, metadata):
    if tickers is not None:
        header["tickers"] = ",".join(tickers)
    if standardization is not None:
        header["standardization_fitted_on"] = standardization.fitted_on
        blocks["standardization.mean"] = standardization.mean
        blocks["standardization.std"] = standardization.std
    for key, value in (metadata or {}).items():
        header[key] = value


def save_kan_model(path, model: KanPcaModel, *, standardization=None, tickers=None, metadata=None):
    first = model.encoder[0].knots
    header = {
        "kind": "kan_pca",
        "architecture": _shape_str(model.architecture),
        "mode": model.mode,
        "degree": first.degree,
        "grid": ";".join(
            f"{layer.knots.num_intervals}@[{layer.knots.domain[0]!r},{layer.knots.domain[1]!r}]"
            for layer in model.encoder
        ),
        "init": model.init,
        "seed": model.seed,
    }
    blocks = {}
    for idx, layer in enumerate(model.encoder):
        header[f"layer{idx}.mode"] = layer.mode
        blocks[f"encoder.{idx}.knots"] = layer.knots.interior
        blocks[f"encoder.{idx}.w_b"] = layer.w_b
        blocks[f"encoder.{idx}.w_s"] = layer.w_s
        blocks[f"encoder.{idx}.coeffs"] = layer.coeffs
        blocks[f"encoder.{idx}.slope"] = layer.slope
    blocks["decoder"] = model.decoder
    _common(header, blocks, standardization, tickers, metadata)
    write_model_file(path, header, blocks)


def save_pca_model(path, model: PcaModel, *, standardization=None, tickers=None, metadata=None):
    header = {
        "kind": "pca",
        "architecture": f"{model.n_features},{model.k},{model.n_features}",
        "mode": "linear",
        "k": model.k,
        "total_variance": repr(model.total_variance),
    }
    blocks = {
        "loadings": model.loadings,
        "explained_ratios": model.explained_ratios,
        "eigenvalues": model.eigenvalues,
    }
    _common(header, blocks, standardization, tickers, metadata)
    write_model_file(path, header, blocks)


def standardization_from(mf: ModelFile) -> Standardization | None:
    if "standardization.mean" not in mf.blocks:
        return None
    return Standardization(
        mf.blocks["standardization.mean"],
        mf.blocks["standardization.std"],
        mf.header.get("standardization_fitted_on", "train"),
    )


def tickers_from(mf: ModelFile) -> tuple | None:
    value = mf.header.get("tickers")
    return tuple(value.split(",")) if value else None


def kan_model_from(mf: ModelFile) -> KanPcaModel:
    if mf.kind != "kan_pca":
        raise DataError(f"expected a kan_pca model file, got kind {mf.kind!r}")
    degree = int(mf.header["degree"])
    layers = []
    idx = 0
    while f"encoder.{idx}.knots" in mf.blocks:
        b = lambda name: mf.blocks[f"encoder.{idx}.{name}"]  # noqa: E731
        layers.append(
            KanLayer(
                KnotVector(degree, b("knots")),
                b("w_b"),
                b("w_s"),
                b("coeffs"),
                b("slope"),
                mf.header.get(f"layer{idx}.mode", AFFINE),
            )
        )
        idx += 1
    return KanPcaModel(layers, mf.blocks["decoder"], mf.header.get("init", "random"),
                       int(mf.header.get("seed", 0)))


def pca_model_from(mf: ModelFile) -> PcaModel:
    if mf.kind != "pca":
        raise DataError(f"expected a pca model file, got kind {mf.kind!r}")
    return PcaModel(
        mf.blocks["loadings"],
        int(mf.header["k"]),
        mf.blocks["explained_ratios"],
        float(mf.header["total_variance"]),
        mf.blocks["eigenvalues"],
    )


def load_model(path):
    """Return ``(model, ModelFile)`` for either model kind."""
    mf = read_model_file(path)
    if mf.kind == "kan_pca":
        return kan_model_from(mf), mf
    if mf.kind == "pca":
        return pca_model_from(mf), mf
    raise DataError(f"{path}: unknown model kind {mf.kind!r}")
