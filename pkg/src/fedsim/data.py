"""Benchmark datasets: synthetic non-IID generation, MNIST ingestion, partitioning.

All generators are pure functions of their arguments plus a seed; see
:mod:`fedsim.rng` for the stream discipline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .rng import stream

SYNTH_D_FEAT = 60
SYNTH_N_CLASSES = 10
TEST_FRACTION = 0.2

# Per-client sizes are 10 + round(LogNormal(mu, sigma)). sigma fixes the
# heavy tail; mu is calibrated so the 30-client mean *training* size (after
# the 20% test split) lands near 670.
SIZE_SIGMA = 1.2
SIZE_MU = math.log(670.0 / (1.0 - TEST_FRACTION) - 10.0) - 0.5 * SIZE_SIGMA**2

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxError):
    """File is shorter than its header claims."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the number of records."""


class PartitionError(ValueError):
    """Requested partition cannot be satisfied by the available samples."""


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class ClientDataset:
    """One client's training samples. Sample order is fixed at construction."""

    client_id: int
    x: np.ndarray  # (m, d_feat) float64
    y: np.ndarray  # (m,) int64 labels

    @property
    def m(self) -> int:
        return self.x.shape[0]

    def sample(self, j: int) -> Sample:
        return Sample(self.x[j], int(self.y[j]))


@dataclass
class FederatedDataset:
    clients: list[ClientDataset]
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    d_feat: int
    provenance: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def pooled_train(self) -> tuple[np.ndarray, np.ndarray]:
        """All training samples concatenated in client order."""
        x = np.concatenate([c.x for c in self.clients], axis=0)
        y = np.concatenate([c.y for c in self.clients], axis=0)
        return x, y


def _stratified_test_split(
    x: np.ndarray, y: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Hold out ~20% of samples per class; kept samples preserve input order."""
    test_mask = np.zeros(len(y), dtype=bool)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        n_test = int(math.floor(TEST_FRACTION * len(idx)))
        if n_test > 0:
            picked = rng.permutation(idx)[:n_test]
            test_mask[picked] = True
    keep = ~test_mask
    return x[keep], y[keep], x[test_mask], y[test_mask]


def _draw_sizes(n_clients: int, seed: int) -> np.ndarray:
    rng = stream(seed, "sizes")
    raw = rng.lognormal(mean=SIZE_MU, sigma=SIZE_SIGMA, size=n_clients)
    return 10 + np.rint(raw).astype(np.int64)


def generate_synthetic(
    alpha: float, beta: float, n_clients: int, seed: int
) -> FederatedDataset:
    """Generate the synthetic non-IID classification benchmark.

    ``alpha`` spreads the per-client label models, ``beta`` spreads the
    per-client feature centers; (0, 0) is the most homogeneous setting.
    Per-client sizes follow the heavy-tailed scheme in :data:`SIZE_MU`.
    A 20% stratified slice of every client is pooled into one test set.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")

    sizes = _draw_sizes(n_clients, seed)
    feat_scale = np.arange(1, SYNTH_D_FEAT + 1, dtype=np.float64) ** -0.6

    clients: list[ClientDataset] = []
    test_xs: list[np.ndarray] = []
    test_ys: list[np.ndarray] = []
    for i in range(n_clients):
        rng = stream(seed, "client", i)
        u = rng.normal(0.0, alpha)
        w = rng.normal(u, 1.0, size=(SYNTH_N_CLASSES, SYNTH_D_FEAT))
        b = rng.normal(u, 1.0, size=SYNTH_N_CLASSES)
        center_mean = rng.normal(0.0, beta)
        center = rng.normal(center_mean, 1.0, size=SYNTH_D_FEAT)
        m = int(sizes[i])
        x = center + rng.standard_normal((m, SYNTH_D_FEAT)) * feat_scale
        y = np.argmax(x @ w.T + b, axis=1).astype(np.int64)

        tx, ty = x, y
        kx, ky, hx, hy = _stratified_test_split(tx, ty, stream(seed, "split", i))
        if len(ky) == 0:  # degenerate tiny client: keep everything
            kx, ky, hx, hy = tx, ty, tx[:0], ty[:0]
        clients.append(ClientDataset(i, np.ascontiguousarray(kx), ky))
        test_xs.append(hx)
        test_ys.append(hy)

    return FederatedDataset(
        clients=clients,
        test_x=np.concatenate(test_xs, axis=0),
        test_y=np.concatenate(test_ys, axis=0),
        n_classes=SYNTH_N_CLASSES,
        d_feat=SYNTH_D_FEAT,
        provenance={
            "kind": "synthetic",
            "alpha": alpha,
            "beta": beta,
            "n_clients": n_clients,
            "seed": seed,
        },
    )


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxTruncatedError(f"{path}: truncated header")
    return struct.unpack_from(">i", buf, offset)[0]


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label file pair.

    Returns features scaled to [0, 1] with shape (n, rows*cols) and int labels.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    magic = _read_be32(img_buf, 0, str(images_path))
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(
            f"{images_path}: bad image magic 0x{magic & 0xFFFFFFFF:08x}"
        )
    n_img = _read_be32(img_buf, 4, str(images_path))
    rows = _read_be32(img_buf, 8, str(images_path))
    cols = _read_be32(img_buf, 12, str(images_path))
    expected = 16 + n_img * rows * cols
    if len(img_buf) < expected:
        raise IdxTruncatedError(
            f"{images_path}: expected {expected} bytes, found {len(img_buf)}"
        )
    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n_img * rows * cols, offset=16)

    with open(labels_path, "rb") as f:
        lab_buf = f.read()
    magic = _read_be32(lab_buf, 0, str(labels_path))
    if magic != IDX_LABELS_MAGIC:
        raise IdxMagicError(
            f"{labels_path}: bad label magic 0x{magic & 0xFFFFFFFF:08x}"
        )
    n_lab = _read_be32(lab_buf, 4, str(labels_path))
    if len(lab_buf) < 8 + n_lab:
        raise IdxTruncatedError(
            f"{labels_path}: expected {8 + n_lab} bytes, found {len(lab_buf)}"
        )
    if n_img != n_lab:
        raise IdxCountMismatchError(
            f"{n_img} images vs {n_lab} labels"
        )
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_lab, offset=8)

    features = pixels.astype(np.float64).reshape(n_img, rows * cols) / 255.0
    return features, labels.astype(np.int64)


def _assign_client_labels(
    n_clients: int, labels_per_client: int, n_classes: int, seed: int
) -> list[np.ndarray]:
    """Pick labels_per_client distinct classes per client, covering all classes."""
    rng = stream(seed, "labels")
    chosen = [
        np.sort(rng.choice(n_classes, size=labels_per_client, replace=False))
        for _ in range(n_clients)
    ]
    counts = np.zeros(n_classes, dtype=np.int64)
    for lab in chosen:
        counts[lab] += 1
    # Deterministic repair: every class must land on at least one client,
    # otherwise its samples could not be placed anywhere.
    for missing in np.flatnonzero(counts == 0):
        done = False
        for surplus in np.argsort(-counts, kind="stable"):
            if counts[surplus] <= 1:
                break
            for i in range(n_clients):
                lab = chosen[i]
                if surplus in lab and missing not in lab:
                    lab[lab == surplus] = missing
                    chosen[i] = np.sort(lab)
                    counts[surplus] -= 1
                    counts[missing] += 1
                    done = True
                    break
            if done:
                break
        if not done:
            raise PartitionError("cannot cover every class with the requested shards")
    return chosen


def partition_label_shards(
    features: np.ndarray,
    labels: np.ndarray,
    n_clients: int,
    labels_per_client: int,
    seed: int,
) -> FederatedDataset:
    """Partition a pool so each client holds exactly labels_per_client classes.

    The partition is exhaustive and disjoint; per-client sizes follow the same
    heavy-tailed weights as the synthetic benchmark, subject to class
    availability. A 20% stratified slice per client is pooled into the test set.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    if n_clients * labels_per_client < n_classes:
        raise PartitionError(
            "n_clients * labels_per_client must be >= n_classes so every class can appear"
        )
    if len(labels) < n_clients:
        raise PartitionError("fewer samples than clients")

    chosen = _assign_client_labels(n_clients, labels_per_client, n_classes, seed)
    holders: list[list[int]] = [[] for _ in range(n_classes)]
    for i, lab in enumerate(chosen):
        for cls in lab:
            holders[cls].append(i)

    size_weights = stream(seed, "sizes").lognormal(0.0, SIZE_SIGMA, size=n_clients)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in range(n_classes):
        idx = np.flatnonzero(labels == cls)
        who = holders[cls]
        if not who:
            continue
        if len(idx) < len(who):
            raise PartitionError(
                f"class {cls} has {len(idx)} samples for {len(who)} clients"
            )
        idx = stream(seed, "class", cls).permutation(idx)
        w = size_weights[who]
        spare = len(idx) - len(who)
        raw = spare * w / w.sum()
        quota = np.floor(raw).astype(np.int64)
        remainder = raw - quota
        # Largest-remainder apportionment, ties to the lower client position.
        for pos in np.argsort(-remainder, kind="stable")[: spare - int(quota.sum())]:
            quota[pos] += 1
        quota += 1  # every holder gets at least one sample of each of its classes
        offset = 0
        for pos, client in enumerate(who):
            take = int(quota[pos])
            parts[client].append(idx[offset : offset + take])
            offset += take

    clients: list[ClientDataset] = []
    test_xs: list[np.ndarray] = []
    test_ys: list[np.ndarray] = []
    for i in range(n_clients):
        mine = np.concatenate(parts[i]) if parts[i] else np.empty(0, dtype=np.int64)
        if len(mine) == 0:
            raise PartitionError(f"client {i} received no samples")
        x, y = features[mine], labels[mine]
        kx, ky, hx, hy = _stratified_test_split(x, y, stream(seed, "split", i))
        clients.append(ClientDataset(i, np.ascontiguousarray(kx), ky))
        test_xs.append(hx)
        test_ys.append(hy)

    return FederatedDataset(
        clients=clients,
        test_x=np.concatenate(test_xs, axis=0),
        test_y=np.concatenate(test_ys, axis=0),
        n_classes=n_classes,
        d_feat=features.shape[1],
        provenance={
            "kind": "label_shards",
            "n_clients": n_clients,
            "labels_per_client": labels_per_client,
            "seed": seed,
        },
    )


def save_dataset(dataset: FederatedDataset, path) -> None:
    """Write a dataset to the self-describing text container (see README)."""
    with open(path, "w", encoding="ascii") as f:
        f.write("fedsim-dataset v1\n")
        prov = " ".join(f"prov_{k}={v!r}" for k, v in sorted(dataset.provenance.items()))
        f.write(
            f"meta d_feat={dataset.d_feat} n_classes={dataset.n_classes} "
            f"n_clients={dataset.n_clients} n_test={len(dataset.test_y)} {prov}\n"
        )
        for c in dataset.clients:
            f.write(f"client id={c.client_id} m={c.m}\n")
            for j in range(c.m):
                row = " ".join(repr(float(v)) for v in c.x[j])
                f.write(f"{c.y[j]} {row}\n")
        f.write("test\n")
        for j in range(len(dataset.test_y)):
            row = " ".join(repr(float(v)) for v in dataset.test_x[j])
            f.write(f"{dataset.test_y[j]} {row}\n")


def _parse_block(lines: list[str], start: int, count: int, d_feat: int):
    x = np.empty((count, d_feat), dtype=np.float64)
    y = np.empty(count, dtype=np.int64)
    for j in range(count):
        parts = lines[start + j].split()
        if len(parts) != d_feat + 1:
            raise ValueError(f"line {start + j + 1}: expected {d_feat + 1} fields")
        y[j] = int(parts[0])
        x[j] = [float(v) for v in parts[1:]]
    return x, y, start + count


def load_dataset(path) -> FederatedDataset:
    """Read a dataset written by :func:`save_dataset`."""
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "fedsim-dataset v1":
        raise ValueError(f"{path}: not a fedsim dataset container")
    meta = dict(kv.split("=", 1) for kv in lines[1].split()[1:])
    d_feat = int(meta["d_feat"])
    n_classes = int(meta["n_classes"])
    n_clients = int(meta["n_clients"])
    n_test = int(meta["n_test"])
    import ast

    provenance = {
        k[len("prov_"):]: ast.literal_eval(v)
        for k, v in sorted(meta.items())
        if k.startswith("prov_")
    }

    pos = 2
    clients = []
    for _ in range(n_clients):
        head = lines[pos].split()
        if head[0] != "client":
            raise ValueError(f"line {pos + 1}: expected client block")
        fields = dict(kv.split("=", 1) for kv in head[1:])
        cid, m = int(fields["id"]), int(fields["m"])
        x, y, pos = _parse_block(lines, pos + 1, m, d_feat)
        clients.append(ClientDataset(cid, x, y))
    if lines[pos] != "test":
        raise ValueError(f"line {pos + 1}: expected test block")
    tx, ty, pos = _parse_block(lines, pos + 1, n_test, d_feat)
    return FederatedDataset(clients, tx, ty, n_classes, d_feat, provenance)
