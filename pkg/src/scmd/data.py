"""Synthetic multi-domain classification data.

Samples live in a latent 2-D space with class centroids on the unit circle;
labels come from the nearest centroid *before* any domain transform, so all
domains share one gold labeling function. Each domain then applies a rotation
plus a diagonal scaling, and a fixed seeded linear map embeds the result into
the ambient feature space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._fileio import atomic_write_text
from .errors import ParameterError

# rejection cap while re-drawing a latent that left its class cell
_MAX_DRAWS = 10_000


@dataclass(frozen=True)
class LabeledSample:
    id: int
    x: np.ndarray
    y: int
    d: int


@dataclass(frozen=True)
class SplitSpec:
    held_out_domain: int
    train_fraction: float = 0.8
    split_seed: int = 0


@dataclass
class DomainDataset:
    samples: list
    num_classes: int
    num_domains: int
    feature_dim: int
    seed: int
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def ids(self):
        return [s.id for s in self.samples]

    def arrays(self):
        """(ids, X, y, d) as numpy arrays in dataset order."""
        ids = np.array([s.id for s in self.samples], dtype=np.int64)
        x = np.stack([s.x for s in self.samples]).astype(np.float64)
        y = np.array([s.y for s in self.samples], dtype=np.int64)
        d = np.array([s.d for s in self.samples], dtype=np.int64)
        return ids, x, y, d

    def _view(self, samples):
        return DomainDataset(
            samples=samples,
            num_classes=self.num_classes,
            num_domains=self.num_domains,
            feature_dim=self.feature_dim,
            seed=self.seed,
            config=self.config,
        )


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _nearest_centroid(point, centroids):
    return int(((centroids - point) ** 2).sum(axis=1).argmin())


def gen_synthetic(num_classes, num_domains, n_per_domain, feature_dim,
                  shift_strength, noise, seed) -> DomainDataset:
    """Deterministic per seed; class counts per domain are balanced within 1.

    Latents are redrawn until they stay in their own class cell, so the
    nearest-centroid label always matches the intended (balanced) class.
    """
    if num_classes < 2 or num_domains < 2 or feature_dim < 2 or n_per_domain < 1:
        raise ParameterError(
            f"need classes >= 2, domains >= 2, feature_dim >= 2, n_per_domain >= 1; "
            f"got C={num_classes} M={num_domains} D={feature_dim} n={n_per_domain}"
        )
    if noise < 0 or shift_strength < 0:
        raise ParameterError("noise and shift_strength must be >= 0")

    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centroids = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    domain_scales = rng.uniform(0.7, 1.3, size=(num_domains, 2))
    embed = rng.normal(size=(2, feature_dim)) / np.sqrt(2.0)

    samples = []
    next_id = 0
    for m in range(num_domains):
        transform = np.diag(domain_scales[m]) @ _rotation(m * shift_strength)
        for j in range(n_per_domain):
            c = j % num_classes
            for _ in range(_MAX_DRAWS):
                latent = centroids[c] + rng.normal(0.0, noise, size=2)
                if _nearest_centroid(latent, centroids) == c:
                    break
            else:
                raise ParameterError(
                    f"could not draw a latent inside class {c}'s cell after {_MAX_DRAWS} tries"
                )
            x = (transform @ latent) @ embed
            samples.append(LabeledSample(id=next_id, x=x, y=c, d=m))
            next_id += 1

    return DomainDataset(
        samples=samples,
        num_classes=num_classes,
        num_domains=num_domains,
        feature_dim=feature_dim,
        seed=seed,
        config={
            "num_classes": num_classes,
            "num_domains": num_domains,
            "n_per_domain": n_per_domain,
            "feature_dim": feature_dim,
            "shift_strength": shift_strength,
            "noise": noise,
            "seed": seed,
        },
    )


def split_lodo(ds: DomainDataset, held_out: int):
    """Partition by domain tag: (all other domains, the held-out domain)."""
    if not 0 <= held_out < ds.num_domains:
        raise ParameterError(f"held-out domain {held_out} not in [0, {ds.num_domains})")
    train = [s for s in ds.samples if s.d != held_out]
    test = [s for s in ds.samples if s.d == held_out]
    return ds._view(train), ds._view(test)


def split_train_val(ds: DomainDataset, train_fraction, seed):
    """Per-domain shuffle split, deterministic per seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0,1), got {train_fraction}")
    if not ds.samples:
        raise ParameterError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for m in sorted({s.d for s in ds.samples}):
        members = [s for s in ds.samples if s.d == m]
        order = rng.permutation(len(members))
        cut = int(np.floor(train_fraction * len(members)))
        train.extend(members[i] for i in order[:cut])
        val.extend(members[i] for i in order[cut:])
    train.sort(key=lambda s: s.id)
    val.sort(key=lambda s: s.id)
    return ds._view(train), ds._view(val)


def make_batches(ds: DomainDataset, batch_size, epoch_seed):
    """Shuffled contiguous chunks of sample ids; the final short batch is kept."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    ids = np.array(ds.ids(), dtype=np.int64)
    perm = np.random.default_rng(epoch_seed).permutation(ids)
    return [perm[i:i + batch_size].tolist() for i in range(0, len(perm), batch_size)]


# ---- dataset file: JSON header line, then one CSV row per sample ----

def save_dataset(ds: DomainDataset, path):
    header = {
        "format": "scmd-dataset",
        "version": 1,
        "num_classes": ds.num_classes,
        "num_domains": ds.num_domains,
        "feature_dim": ds.feature_dim,
        "seed": ds.seed,
        "config": ds.config,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for s in ds.samples:
        coords = ",".join(repr(float(v)) for v in s.x)
        lines.append(f"{s.id},{s.d},{s.y},{coords}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path) -> DomainDataset:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise ParameterError(f"bad dataset header: {e}") from e
        if header.get("format") != "scmd-dataset":
            raise ParameterError(f"not a dataset file: format={header.get('format')!r}")
        d = header["feature_dim"]
        samples = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + d:
                raise ParameterError(
                    f"line {lineno}: expected {3 + d} fields, got {len(parts)}"
                )
            samples.append(LabeledSample(
                id=int(parts[0]),
                d=int(parts[1]),
                y=int(parts[2]),
                x=np.array([float(v) for v in parts[3:]]),
            ))
    return DomainDataset(
        samples=samples,
        num_classes=header["num_classes"],
        num_domains=header["num_domains"],
        feature_dim=d,
        seed=header["seed"],
        config=header.get("config", {}),
    )
