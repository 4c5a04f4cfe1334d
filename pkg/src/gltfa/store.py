"""Persistent draw-store format and run manifests.

A store is a text file: one header line carrying the reproducibility
manifest (config, seed, data fingerprint, chain id), then one line per
retained draw, and an optional trailing summary line.  Reals are written
with repr(), i.e. the shortest decimal that round-trips exactly, so a
write/read cycle is bit-exact and identical runs produce identical bytes.
Wall-clock metadata lives in the separate manifest JSON, never in the
store, to keep stores byte-reproducible.

Record line sections, separated by '|':

    it r r_sp d | support i,j ... | loadings | sigma2 | tau |
    alpha gamma | theta | kappa | move:acc/att ...
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .model import ModelError
from .sampler import DrawRecord

__all__ = ["StoreError", "DrawStore", "StoreWriter", "data_fingerprint",
           "read_store", "write_store", "merge_stores"]

HEADER_TAG = "#gltfa-store v1 "
END_TAG = "#end "


class StoreError(ModelError):
    pass


def data_fingerprint(y: np.ndarray) -> str:
    h = hashlib.sha256()
    y = np.ascontiguousarray(y, dtype=np.float64)
    h.update(str(y.shape).encode())
    h.update(y.tobytes())
    return h.hexdigest()


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> np.ndarray:
    return (np.array([float(v) for v in text.split()])
            if text.strip() else np.empty(0))


def encode_record(rec: DrawRecord) -> str:
    head = f"{rec.iteration} {rec.r} {rec.r_sp} {rec.d}"
    support = " ".join(f"{i},{j}" for i, j in rec.support)
    acc = " ".join(f"{mv}:{a}/{n}" for mv, (a, n) in sorted(rec.accept.items()))
    parts = [
        head,
        support,
        _fmt_floats(rec.lam_values),
        _fmt_floats(rec.sigma2),
        _fmt_floats(rec.tau),
        f"{rec.alpha!r} {rec.gamma!r}",
        "" if rec.theta is None else _fmt_floats(rec.theta),
        "" if rec.kappa is None else repr(float(rec.kappa)),
        acc,
    ]
    return "|".join(parts)


def decode_record(line: str) -> DrawRecord:
    parts = line.split("|")
    if len(parts) != 9:
        raise StoreError(f"expected 9 sections, found {len(parts)}")
    it, r, r_sp, d = (int(v) for v in parts[0].split())
    if parts[1].strip():
        pairs = [p.split(",") for p in parts[1].split()]
        support = np.array([[int(i), int(j)] for i, j in pairs], dtype=np.int64)
    else:
        support = np.empty((0, 2), dtype=np.int64)
    if support.shape[0] != d:
        raise StoreError(f"support size {support.shape[0]} does not match d={d}")
    lam_values = _parse_floats(parts[2])
    if lam_values.shape[0] != d:
        raise StoreError("loading count does not match d")
    sigma2 = _parse_floats(parts[3])
    tau = _parse_floats(parts[4])
    if tau.shape[0] != r:
        raise StoreError("tau count does not match r")
    alpha_s, gamma_s = parts[5].split()
    theta = None if not parts[6].strip() else _parse_floats(parts[6])
    kappa = None if not parts[7].strip() else float(parts[7])
    accept = {}
    for tok in parts[8].split():
        mv, frac = tok.split(":")
        a, n = frac.split("/")
        accept[mv] = (int(a), int(n))
    return DrawRecord(iteration=it, r=r, r_sp=r_sp, d=d, support=support,
                      lam_values=lam_values, sigma2=sigma2, tau=tau,
                      alpha=float(alpha_s), gamma=float(gamma_s),
                      theta=theta, kappa=kappa, accept=accept)


@dataclass
class DrawStore:
    manifest: dict
    records: list = field(default_factory=list)
    end_info: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def append(self, rec: DrawRecord):
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)


class StoreWriter:
    """Streaming writer; flushes per record so aborted runs keep their draws."""

    def __init__(self, path, manifest: dict):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(HEADER_TAG + json.dumps(manifest, sort_keys=True) + "\n")
        self._fh.flush()
        self.n_records = 0

    def append(self, rec: DrawRecord):
        self._fh.write(encode_record(rec) + "\n")
        self._fh.flush()
        self.n_records += 1

    def close(self, end_info: dict | None = None):
        if self._fh.closed:
            return
        if end_info:
            self._fh.write(END_TAG + json.dumps(end_info, sort_keys=True) + "\n")
        self._fh.close()


def write_store(path, manifest: dict, records, end_info: dict | None = None):
    writer = StoreWriter(path, manifest)
    for rec in records:
        writer.append(rec)
    writer.close(end_info)


def read_store(path) -> DrawStore:
    """Read a store; an incomplete final line is dropped with a warning."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(HEADER_TAG):
        raise StoreError(f"{path}: missing store header line")
    store = DrawStore(manifest=json.loads(lines[0][len(HEADER_TAG):]))
    n = len(lines)
    for idx in range(1, n):
        line = lines[idx]
        if line.startswith(END_TAG):
            try:
                store.end_info = json.loads(line[len(END_TAG):])
            except json.JSONDecodeError:
                store.warnings.append(f"{path}:{idx + 1}: dropped corrupt end line")
            continue
        if line.startswith("#"):
            continue
        try:
            store.records.append(decode_record(line))
        except (StoreError, ValueError) as exc:
            if idx == n - 1:
                store.warnings.append(
                    f"{path}:{idx + 1}: dropped incomplete final record ({exc})")
            else:
                raise StoreError(f"{path}:{idx + 1}: corrupt record: {exc}") from None
    return store


def write_store_binary(path, manifest: dict, records):
    """Compact binary alternative: one .npz with packed record arrays.

    Same semantics as the text format; use it when stores grow beyond what
    text handles comfortably.  Read back with :func:`read_store_binary`.
    """
    records = list(records)
    heads = np.array([[r.iteration, r.r, r.r_sp, r.d] for r in records],
                     dtype=np.int64).reshape(len(records), 4)
    accepts = [sorted(r.accept.items()) for r in records]
    payload = {
        "manifest": np.frombuffer(json.dumps(manifest, sort_keys=True).encode(),
                                  dtype=np.uint8),
        "head": heads,
        "support": (np.concatenate([r.support for r in records])
                    if records else np.empty((0, 2), dtype=np.int64)),
        "lam": (np.concatenate([r.lam_values for r in records])
                if records else np.empty(0)),
        "sigma2": (np.concatenate([r.sigma2 for r in records])
                   if records else np.empty(0)),
        "tau": (np.concatenate([r.tau for r in records])
                if records else np.empty(0)),
        "alpha_gamma": np.array([[r.alpha, r.gamma] for r in records]
                                ).reshape(len(records), 2),
        "has_shrink": np.array([r.theta is not None for r in records], dtype=bool),
        "theta": np.concatenate([r.theta for r in records if r.theta is not None]
                                ) if any(r.theta is not None for r in records)
                 else np.empty(0),
        "kappa": np.array([r.kappa if r.kappa is not None else np.nan
                           for r in records]),
        "accept": np.frombuffer(json.dumps(accepts).encode(), dtype=np.uint8),
        "m": np.array([records[0].sigma2.shape[0] if records else 0]),
    }
    np.savez_compressed(path, **payload)


def read_store_binary(path) -> DrawStore:
    from .sampler import DrawRecord as DR

    with np.load(path) as z:
        manifest = json.loads(bytes(z["manifest"]).decode())
        heads = z["head"]
        accepts = json.loads(bytes(z["accept"]).decode())
        store = DrawStore(manifest=manifest)
        m = int(z["m"][0])
        o_sup = o_tau = o_th = 0
        for n in range(heads.shape[0]):
            it, r, r_sp, d = (int(v) for v in heads[n])
            sup = z["support"][o_sup:o_sup + d]
            lam = z["lam"][o_sup:o_sup + d]
            sigma2 = z["sigma2"][n * m:(n + 1) * m]
            tau = z["tau"][o_tau:o_tau + r]
            has_sh = bool(z["has_shrink"][n])
            theta = z["theta"][o_th:o_th + r] if has_sh else None
            kappa = float(z["kappa"][n]) if has_sh else None
            store.records.append(DR(
                iteration=it, r=r, r_sp=r_sp, d=d, support=sup.copy(),
                lam_values=lam.copy(), sigma2=sigma2.copy(), tau=tau.copy(),
                alpha=float(z["alpha_gamma"][n, 0]),
                gamma=float(z["alpha_gamma"][n, 1]),
                theta=None if theta is None else theta.copy(), kappa=kappa,
                accept={mv: (int(a), int(b)) for mv, (a, b) in accepts[n]}))
            o_sup += d
            o_tau += r
            if has_sh:
                o_th += r
    return store


def merge_stores(stores) -> tuple[list, list[str]]:
    """Concatenate records from several chains; warns on duplicate chain ids."""
    stores = list(stores)
    warnings = []
    seen = set()
    records = []
    for store in stores:
        cid = store.manifest.get("chain_id")
        if cid in seen:
            warnings.append(f"duplicate chain id {cid}; draws may be double counted")
        seen.add(cid)
        records.extend(store.records)
    if len({s.manifest.get("data_fingerprint") for s in stores}) > 1:
        warnings.append("stores were fitted to different datasets")
    return records, sorted(set(warnings))
