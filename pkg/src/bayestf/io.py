"""File formats and run manifests.

Tensors are tab-separated with a header ``mode0<TAB>...<TAB>value`` and one
0-based cell per line.  Side information is MatrixMarket coordinate format
(1-based, ``real``/``integer``/``pattern``, ``general``).  Every report
written here has a matching loader so outputs can be re-read.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import ContractError, FormatError
from .model import HyperPriorConfig, ObservationSet
from .sparse import CgSettings, SparseMatrix

__all__ = [
    "load_tensor",
    "load_cells",
    "write_tensor",
    "write_cells",
    "load_side_info",
    "write_side_info",
    "RunManifest",
    "load_manifest",
    "write_metrics",
    "load_metrics",
    "write_measurement_latents",
    "load_measurement_latents",
    "write_table",
    "load_table",
]

VALUE_FMT = "%.17g"  # inputs: exact round trip
PRED_FMT = "%.6g"  # predictions: 6 significant digits


def _lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            yield lineno, line.rstrip("\r\n")


def _parse_header(path, header, allow_no_value):
    cols = header.split("\t")
    has_value = cols[-1] == "value"
    names = cols[:-1] if has_value else cols
    if not has_value and not allow_no_value:
        raise FormatError("header must end with a 'value' column", path, 1)
    if len(names) < 2 or names != [f"mode{m}" for m in range(len(names))]:
        raise FormatError(
            "header must read mode0<TAB>mode1<TAB>...<TAB>value", path, 1
        )
    return len(names), has_value


def _read_cells(path, allow_no_value):
    lines = _lines(path)
    try:
        _, header = next(lines)
    except StopIteration:
        raise FormatError("empty file (missing header)", path) from None
    n_modes, has_value = _parse_header(path, header, allow_no_value)
    width = n_modes + int(has_value)
    idx, vals, where = [], [], []
    for lineno, line in lines:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != width:
            raise FormatError(f"expected {width} tab-separated fields, got {len(parts)}", path, lineno)
        try:
            cell = [int(p) for p in parts[:n_modes]]
        except ValueError:
            raise FormatError("indices must be integers", path, lineno) from None
        if min(cell) < 0:
            raise FormatError("indices must be non-negative", path, lineno)
        if has_value:
            try:
                v = float(parts[-1])
            except ValueError:
                raise FormatError(f"non-numeric value {parts[-1]!r}", path, lineno) from None
            if not np.isfinite(v):
                raise FormatError(f"non-finite value {parts[-1]!r}", path, lineno)
            vals.append(v)
        idx.append(cell)
        where.append(lineno)
    if not idx:
        raise FormatError("no observations", path)
    idx = np.array(idx, dtype=np.int64)
    vals = np.array(vals, dtype=np.float64) if has_value else None
    return idx, vals, np.array(where)


def _check_dims(path, idx, where, mode_dims):
    dims = idx.max(axis=0) + 1
    if mode_dims is None:
        return tuple(int(d) for d in dims)
    mode_dims = tuple(int(d) for d in mode_dims)
    if len(mode_dims) != idx.shape[1]:
        raise FormatError(f"file has {idx.shape[1]} modes but mode_dims has {len(mode_dims)}", path)
    bad = np.flatnonzero(np.any(idx >= np.array(mode_dims), axis=1))
    if bad.size:
        k = bad[0]
        raise FormatError(f"cell {tuple(int(i) for i in idx[k])} out of range for mode dims {mode_dims}",
                          path, int(where[k]))
    return mode_dims


def load_tensor(path, mode_dims=None) -> ObservationSet:
    """Parse a tensor TSV.  ``mode_dims`` defaults to 1 + max index per mode."""
    idx, vals, where = _read_cells(path, allow_no_value=False)
    dims = _check_dims(path, idx, where, mode_dims)
    obs = ObservationSet(idx, vals, dims, check_duplicates=False)
    dup = obs.find_duplicate()
    if dup is not None:
        raise FormatError(f"duplicate cell {tuple(int(i) for i in idx[dup])}", path, int(where[dup]))
    return obs


def load_cells(path, mode_dims=None):
    """Cells to predict: a tensor TSV whose value column is optional.

    Returns an ObservationSet (values are zero when absent) and a flag
    telling whether values were present.
    """
    idx, vals, where = _read_cells(path, allow_no_value=True)
    dims = _check_dims(path, idx, where, mode_dims)
    has_value = vals is not None
    obs = ObservationSet(idx, vals if has_value else np.zeros(len(idx)), dims, check_duplicates=False)
    dup = obs.find_duplicate()
    if dup is not None:
        raise FormatError(f"duplicate cell {tuple(int(i) for i in idx[dup])}", path, int(where[dup]))
    return obs, has_value


def write_tensor(path, indices, values, fmt=VALUE_FMT):
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n_modes = indices.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join([f"mode{m}" for m in range(n_modes)] + ["value"]) + "\n")
        for cell, v in zip(indices.tolist(), values.tolist()):
            fh.write("\t".join(str(i) for i in cell) + "\t" + (fmt % v) + "\n")


def write_cells(path, indices):
    indices = np.asarray(indices, dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(f"mode{m}" for m in range(indices.shape[1])) + "\n")
        for cell in indices.tolist():
            fh.write("\t".join(str(i) for i in cell) + "\n")


# -- MatrixMarket ---------------------------------------------------------

def load_side_info(path) -> SparseMatrix:
    """Read a MatrixMarket coordinate file into CSR.

    Hand-rolled rather than scipy.io.mmread so that malformed lines,
    out-of-bounds indices and duplicates are reported with line numbers.
    """
    lines = _lines(path)
    try:
        _, banner = next(lines)
    except StopIteration:
        raise FormatError("empty file", path) from None
    tok = banner.lower().split()
    if len(tok) != 5 or tok[0] != "%%matrixmarket" or tok[1] != "matrix" or tok[2] != "coordinate":
        raise FormatError("expected '%%MatrixMarket matrix coordinate <field> general'", path, 1)
    field_, symmetry = tok[3], tok[4]
    if field_ not in ("real", "integer", "pattern"):
        raise FormatError(f"unsupported field {field_!r}", path, 1)
    if symmetry != "general":
        raise FormatError(f"unsupported symmetry {symmetry!r} (only 'general')", path, 1)
    pattern = field_ == "pattern"

    size = None
    for lineno, line in lines:
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        try:
            size = [int(p) for p in parts]
        except ValueError:
            size = None
        if size is None or len(size) != 3 or min(size) < 0:
            raise FormatError("size line must hold three non-negative integers", path, lineno)
        break
    if size is None:
        raise FormatError("missing size line", path)
    nrows, ncols, nnz = size

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.ones(nnz, dtype=np.float64)
    where = np.empty(nnz, dtype=np.int64)
    k = 0
    width = 2 if pattern else 3
    for lineno, line in lines:
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if len(parts) != width:
            raise FormatError(f"expected {width} fields, got {len(parts)}", path, lineno)
        if k >= nnz:
            raise FormatError(f"more entries than the {nnz} declared", path, lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError("indices must be integers", path, lineno) from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise FormatError(f"entry ({i}, {j}) outside declared {nrows} x {ncols}", path, lineno)
        if not pattern:
            try:
                vals[k] = float(parts[2])
            except ValueError:
                raise FormatError(f"non-numeric value {parts[2]!r}", path, lineno) from None
            if not np.isfinite(vals[k]):
                raise FormatError(f"non-finite value {parts[2]!r}", path, lineno)
        rows[k], cols[k], where[k] = i - 1, j - 1, lineno
        k += 1
    if k != nnz:
        raise FormatError(f"declared {nnz} entries but found {k}", path)

    keys = rows * max(ncols, 1) + cols
    _, first = np.unique(keys, return_index=True)
    if first.size != nnz:
        seen = np.zeros(nnz, dtype=bool)
        seen[first] = True
        d = int(np.flatnonzero(~seen)[0])
        raise FormatError(f"duplicate entry ({rows[d] + 1}, {cols[d] + 1})", path, int(where[d]))
    return SparseMatrix.from_coo(nrows, ncols, rows, cols, vals)


def write_side_info(path, X: SparseMatrix):
    rows, cols, vals = X.to_coo()
    mat = sp.coo_matrix((vals, (rows, cols)), shape=X.shape)
    scipy.io.mmwrite(path, mat, field="real", precision=17, symmetry="general")


# -- manifests ------------------------------------------------------------

_SAMPLER_KEYS = {"D", "burn_in", "n_samples", "seed", "threads", "keep_samples",
                 "mode_order", "warm_start", "chat_mask", "chat_slices"}
_HYPER_KEYS = set(HyperPriorConfig.__dataclass_fields__)
_CG_KEYS = {"rel_tolerance", "abs_tolerance", "max_iterations"}


@dataclass
class RunManifest:
    """Everything ``train`` needs, with paths already made absolute.

    JSON layout (relative paths resolve against the manifest's directory)::

        {"tensor": "tensor.tsv", "mode_dims": [..], "mode_names": [..],
         "side_info": {"0": "features-mode0.mtx"},
         "test": "test.tsv",
         "holdout": {"fraction": 0.2, "mode": 2, "index": 0, "seed": 0},
         "cold_start": {"mode": 0, "fraction": 0.25},
         "sampler": {"D": 10, "burn_in": 100, "n_samples": 100, "seed": 0,
                     "hyper": {...}, "cg": {...}},
         "out": "run"}
    """

    tensor: str
    mode_dims: Optional[List[int]] = None
    mode_names: Optional[List[str]] = None
    side_info: Dict[int, str] = field(default_factory=dict)
    test: Optional[str] = None
    holdout: Optional[dict] = None
    cold_start: Optional[dict] = None
    sampler: dict = field(default_factory=dict)
    out: Optional[str] = None
    path: Optional[str] = None

    def sampler_config(self, **overrides):
        from .sampler import SamplerConfig

        raw = dict(self.sampler)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        hyper = dict(raw.pop("hyper", {}) or {})
        cg = dict(raw.pop("cg", {}) or {})
        if hyper.get("W0") is not None:
            hyper["W0"] = np.asarray(hyper["W0"], dtype=float)
        kw = {k: raw[k] for k in _SAMPLER_KEYS if k in raw}
        if "chat_slices" in kw:
            kw["chat_slices"] = tuple(kw["chat_slices"])
        return SamplerConfig(cg=CgSettings(**cg), hyper=HyperPriorConfig(**hyper), **kw)

    def to_dict(self):
        return {
            "tensor": self.tensor,
            "mode_dims": self.mode_dims,
            "mode_names": self.mode_names,
            "side_info": {str(k): v for k, v in self.side_info.items()},
            "test": self.test,
            "holdout": self.holdout,
            "cold_start": self.cold_start,
            "sampler": self.sampler,
            "out": self.out,
        }


def _resolve(base, p):
    if p is None:
        return None
    return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))


def load_manifest(path) -> RunManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(raw, dict):
        raise FormatError("manifest must be a JSON object", path)
    known = {"tensor", "mode_dims", "mode_names", "side_info", "test", "holdout",
             "cold_start", "sampler", "out"}
    unknown = set(raw) - known
    if unknown:
        raise FormatError(f"unknown manifest keys {sorted(unknown)}", path)
    if "tensor" not in raw:
        raise FormatError("manifest has no 'tensor' entry", path)
    base = os.path.dirname(os.path.abspath(path))
    sampler = dict(raw.get("sampler") or {})
    bad = set(sampler) - _SAMPLER_KEYS - {"hyper", "cg"}
    bad |= {"hyper." + k for k in (sampler.get("hyper") or {}) if k not in _HYPER_KEYS}
    bad |= {"cg." + k for k in (sampler.get("cg") or {}) if k not in _CG_KEYS}
    if bad:
        raise FormatError(f"unknown sampler settings {sorted(bad)}", path)
    side = {}
    for k, v in (raw.get("side_info") or {}).items():
        try:
            side[int(k)] = _resolve(base, v)
        except ValueError:
            raise FormatError(f"side_info key {k!r} is not a mode index", path) from None
    m = RunManifest(
        tensor=_resolve(base, raw["tensor"]),
        mode_dims=raw.get("mode_dims"),
        mode_names=raw.get("mode_names"),
        side_info=side,
        test=_resolve(base, raw.get("test")),
        holdout=raw.get("holdout"),
        cold_start=raw.get("cold_start"),
        sampler=sampler,
        out=_resolve(base, raw.get("out")),
        path=os.path.abspath(path),
    )
    for p in [m.tensor, m.test, *m.side_info.values()]:
        if p is not None and not os.path.isfile(p):
            raise FormatError(f"referenced file {p} does not exist", path)
    if m.holdout is not None and m.test is not None:
        raise FormatError("give either 'test' or 'holdout', not both", path)
    return m


# -- reports --------------------------------------------------------------

def write_table(path, columns, rows, fmts=None):
    """Generic TSV: header row then one line per row."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            if fmts is None:
                fh.write("\t".join(str(v) for v in row) + "\n")
            else:
                fh.write("\t".join(f % v for f, v in zip(fmts, row)) + "\n")


def load_table(path, types=None):
    """Read a TSV written by ``write_table``: returns ``{column: list}``."""
    lines = _lines(path)
    try:
        _, header = next(lines)
    except StopIteration:
        raise FormatError("empty file (missing header)", path) from None
    cols = header.split("\t")
    out = {c: [] for c in cols}
    for lineno, line in lines:
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(cols):
            raise FormatError(f"expected {len(cols)} fields, got {len(parts)}", path, lineno)
        for c, p in zip(cols, parts):
            conv = (types or {}).get(c, str)
            try:
                out[c].append(conv(p))
            except ValueError:
                raise FormatError(f"bad value {p!r} in column {c}", path, lineno) from None
    return out


def write_metrics(path, metrics: dict):
    write_table(path, ["metric", "value"],
                [(k, "%.17g" % v if isinstance(v, float) else str(v)) for k, v in metrics.items()])


def load_metrics(path):
    t = load_table(path)
    if list(t) != ["metric", "value"]:
        raise FormatError("expected columns metric, value", path, 1)
    out = {}
    for k, v in zip(t["metric"], t["value"]):
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def write_measurement_latents(path, normalized, raw):
    """One row per (sample, slice, dim) with the normalized and raw value.

    ``normalized`` and ``raw`` are S x N_t x D.
    """
    normalized = np.asarray(normalized, dtype=float)
    raw = np.asarray(raw, dtype=float)
    if normalized.shape != raw.shape or normalized.ndim != 3:
        raise ContractError("normalized and raw must both be S x N_t x D")
    S, Nt, D = normalized.shape
    s, k, d = np.meshgrid(np.arange(S), np.arange(Nt), np.arange(D), indexing="ij")
    rows = zip(s.ravel().tolist(), k.ravel().tolist(), d.ravel().tolist(),
               normalized.ravel().tolist(), raw.ravel().tolist())
    write_table(path, ["sample", "slice", "dim", "normalized", "raw"], rows,
                ["%d", "%d", "%d", "%.17g", "%.17g"])


def load_measurement_latents(path):
    """Inverse of ``write_measurement_latents``: ``(normalized, raw)``."""
    t = load_table(path, {"sample": int, "slice": int, "dim": int, "normalized": float, "raw": float})
    if list(t) != ["sample", "slice", "dim", "normalized", "raw"]:
        raise FormatError("unexpected columns", path, 1)
    if not t["sample"]:
        raise FormatError("no rows", path)
    s, k, d = (np.array(t[c]) for c in ("sample", "slice", "dim"))
    shape = (s.max() + 1, k.max() + 1, d.max() + 1)
    if len(s) != np.prod(shape):
        raise FormatError("incomplete sample x slice x dim grid", path)
    norm = np.full(shape, np.nan)
    raw = np.full(shape, np.nan)
    norm[s, k, d] = t["normalized"]
    raw[s, k, d] = t["raw"]
    if np.isnan(norm).any():
        raise FormatError("incomplete sample x slice x dim grid", path)
    return norm, raw
