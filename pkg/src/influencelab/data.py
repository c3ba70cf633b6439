"""Dataset handling: IDX ingestion, synthetic corpora, seeded splits, and
poisoned-set assembly with per-row provenance."""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

PROVENANCE_TAGS = ("clean", "pgd", "dap", "durp", "fc", "gm")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the offending byte offset."""


@dataclass(frozen=True)
class LabeledSet:
    """Feature rows in [0,1]^(n x d) with labels, provenance tags, and the
    index each row had in its source dataset."""

    X: np.ndarray
    y: np.ndarray
    provenance: np.ndarray
    origin_index: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        prov = np.asarray(self.provenance, dtype="U8")
        origin = np.ascontiguousarray(self.origin_index, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        if not (y.shape == (n,) and prov.shape == (n,) and origin.shape == (n,)):
            raise ValueError("X, y, provenance, origin_index must agree in length")
        if n and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        bad = set(prov.tolist()) - set(PROVENANCE_TAGS)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")
        for arr, name in ((X, "X"), (y, "y"), (prov, "provenance"), (origin, "origin_index")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def clean(cls, X: np.ndarray, y: np.ndarray) -> "LabeledSet":
        n = np.asarray(X).shape[0]
        return cls(X=X, y=y, provenance=np.full(n, "clean", dtype="U8"),
                   origin_index=np.arange(n, dtype=np.int64))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "LabeledSet":
        idx = np.asarray(indices)
        return LabeledSet(X=self.X[idx], y=self.y[idx],
                          provenance=self.provenance[idx], origin_index=self.origin_index[idx])


def _read_be_u32(blob: bytes, offset: int, path) -> int:
    if offset + 4 > len(blob):
        raise IdxFormatError(f"{path}: truncated header at byte offset {offset}")
    return int.from_bytes(blob[offset : offset + 4], "big")


def load_idx(images_path, labels_path) -> LabeledSet:
    """Parse an IDX image/label file pair into a clean LabeledSet.

    Pixels are raw unsigned bytes scaled by 1/255. Structural problems raise
    IdxFormatError naming the byte offset where parsing failed.
    """
    with open(images_path, "rb") as fh:
        img = fh.read()
    with open(labels_path, "rb") as fh:
        lab = fh.read()

    magic = _read_be_u32(img, 0, images_path)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad images magic 0x{magic:08x} at byte offset 0 (expected 0x{IMAGES_MAGIC:08x})"
        )
    n = _read_be_u32(img, 4, images_path)
    rows = _read_be_u32(img, 8, images_path)
    cols = _read_be_u32(img, 12, images_path)
    need = 16 + n * rows * cols
    if len(img) < need:
        raise IdxFormatError(f"{images_path}: truncated image data at byte offset {len(img)} (need {need})")

    lmagic = _read_be_u32(lab, 0, labels_path)
    if lmagic != LABELS_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad labels magic 0x{lmagic:08x} at byte offset 0 (expected 0x{LABELS_MAGIC:08x})"
        )
    ln = _read_be_u32(lab, 4, labels_path)
    if ln != n:
        raise IdxFormatError(
            f"{labels_path}: label count {ln} at byte offset 4 does not match image count {n}"
        )
    if len(lab) < 8 + n:
        raise IdxFormatError(f"{labels_path}: truncated label data at byte offset {len(lab)} (need {8 + n})")

    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    X = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return LabeledSet.clean(X, y)


def split(dataset: LabeledSet, n_trn: int, n_val: int, n_tst: int,
          rng: np.random.Generator) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    """Disjoint seeded partition; val and test are class-stratified."""
    n = len(dataset)
    if n_trn + n_val + n_tst > n:
        raise ValueError(f"requested {n_trn}+{n_val}+{n_tst} rows from a set of {n}")

    classes, counts = np.unique(dataset.y, return_counts=True)

    def quotas(total: int) -> dict[int, int]:
        exact = counts / counts.sum() * total
        base = np.floor(exact).astype(int)
        short = total - base.sum()
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:short]] += 1
        return dict(zip(classes.tolist(), base.tolist()))

    q_val, q_tst = quotas(n_val), quotas(n_tst)
    perm = rng.permutation(n)
    val_idx, tst_idx, pool = [], [], []
    need_val, need_tst = dict(q_val), dict(q_tst)
    for i in perm:
        c = int(dataset.y[i])
        if need_val.get(c, 0) > 0:
            val_idx.append(i)
            need_val[c] -= 1
        elif need_tst.get(c, 0) > 0:
            tst_idx.append(i)
            need_tst[c] -= 1
        else:
            pool.append(i)
    if sum(need_val.values()) or sum(need_tst.values()):
        raise ValueError("not enough rows per class for a stratified val/test split")
    trn_idx = pool[:n_trn]
    return dataset.subset(trn_idx), dataset.subset(val_idx), dataset.subset(tst_idx)


@dataclass(frozen=True)
class PoisonPlan:
    """Which training rows each untargeted attack owns.

    The poisoned total is floor(ratio * n); it splits evenly across the
    attacks with the remainder handed out round-robin in attack order, so
    per-attack counts differ by at most one.
    """

    ratio: float
    attacks: tuple[str, ...]
    assignments: dict[str, np.ndarray]

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"poison ratio must lie in [0, 1], got {self.ratio}")
        if len(set(self.attacks)) != len(self.attacks):
            raise ValueError("duplicate attack names in plan")
        counts = [len(self.assignments[a]) for a in self.attacks]
        if counts and max(counts) - min(counts) > 1:
            raise ValueError(f"per-attack counts must differ by at most 1, got {counts}")

    @classmethod
    def draw(cls, ratio: float, attacks, n: int, rng: np.random.Generator) -> "PoisonPlan":
        attacks = tuple(attacks)
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"poison ratio must lie in [0, 1], got {ratio}")
        total = math.floor(ratio * n)
        chosen = rng.choice(n, size=total, replace=False) if total else np.empty(0, dtype=np.int64)
        k = len(attacks)
        base, rem = (total // k, total % k) if k else (0, 0)
        assignments, start = {}, 0
        for i, name in enumerate(attacks):
            take = base + (1 if i < rem else 0)
            assignments[name] = np.sort(np.asarray(chosen[start : start + take], dtype=np.int64))
            start += take
        return cls(ratio=ratio, attacks=attacks, assignments=assignments)

    @property
    def total_poisoned(self) -> int:
        return sum(len(v) for v in self.assignments.values())

    def per_attack_count(self) -> dict[str, int]:
        return {a: len(self.assignments[a]) for a in self.attacks}


def assemble_poisoned(clean_train: LabeledSet, plan: PoisonPlan,
                      attack_outputs: dict[str, np.ndarray]) -> LabeledSet:
    """Replace the planned rows with attacked pixels; labels stay untouched
    (clean-label regime) and provenance records the attack per row."""
    X = np.array(clean_train.X)
    prov = np.array(clean_train.provenance)
    for name in plan.attacks:
        idx = plan.assignments[name]
        if name not in attack_outputs:
            raise ValueError(f"missing attack output for {name!r}")
        rows = np.asarray(attack_outputs[name], dtype=np.float64)
        if rows.shape != (len(idx), clean_train.dim):
            raise ValueError(
                f"attack {name!r} produced shape {rows.shape}, expected {(len(idx), clean_train.dim)}"
            )
        if rows.size and (rows.min() < 0.0 or rows.max() > 1.0):
            raise ValueError(f"attack {name!r} produced pixels outside [0, 1]")
        X[idx] = rows
        prov[idx] = name
    return LabeledSet(X=X, y=clean_train.y, provenance=prov, origin_index=clean_train.origin_index)


def synthetic_blobs(n: int, rng: np.random.Generator, d: int = 16, n_classes: int = 3,
                    spread: float = 0.08) -> LabeledSet:
    """Gaussian class blobs in [0,1]^d; the fast fallback corpus for CI."""
    centers = rng.uniform(0.25, 0.75, size=(n_classes, d))
    y = rng.integers(0, n_classes, size=n)
    X = np.clip(centers[y] + rng.normal(scale=spread, size=(n, d)), 0.0, 1.0)
    return LabeledSet.clean(X, y)


def rendered_digits(n: int, rng: np.random.Generator, side: int = 28) -> LabeledSet:
    """Grayscale digit images rendered from Hershey glyphs with per-sample
    rotation/shift/scale/thickness jitter plus pixel noise. Desk-scale stand-in
    for MNIST when the IDX files are not on disk."""
    import cv2

    X = np.empty((n, side * side))
    y = rng.integers(0, 10, size=n)
    for i in range(n):
        img = np.zeros((side, side), dtype=np.uint8)
        scale = rng.uniform(0.65, 0.9)
        thickness = int(rng.integers(1, 3))
        cv2.putText(img, str(int(y[i])), (5, side - 5), cv2.FONT_HERSHEY_SIMPLEX,
                    scale, 255, thickness, cv2.LINE_AA)
        angle = rng.uniform(-12.0, 12.0)
        dx, dy = rng.uniform(-2.0, 2.0, size=2)
        M = cv2.getRotationMatrix2D((side / 2, side / 2), angle, 1.0)
        M[:, 2] += (dx, dy)
        img = cv2.warpAffine(img, M, (side, side), flags=cv2.INTER_LINEAR)
        row = img.astype(np.float64) / 255.0
        row += rng.normal(scale=0.04, size=(side, side))
        X[i] = np.clip(row, 0.0, 1.0).ravel()
    return LabeledSet.clean(X, y)


def save_set(path, dataset: LabeledSet, meta: dict | None = None):
    """npz container for a LabeledSet (plus optional string metadata)."""
    arrays = dict(X=dataset.X, y=dataset.y, provenance=dataset.provenance,
                  origin_index=dataset.origin_index)
    for key, val in (meta or {}).items():
        arrays[f"meta_{key}"] = np.asarray(str(val))
    np.savez(path, **arrays)


def load_set(path) -> tuple[LabeledSet, dict]:
    with np.load(path) as npz:
        dataset = LabeledSet(X=npz["X"], y=npz["y"], provenance=npz["provenance"],
                             origin_index=npz["origin_index"])
        meta = {k[5:]: str(npz[k]) for k in npz.files if k.startswith("meta_")}
    return dataset, meta


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
