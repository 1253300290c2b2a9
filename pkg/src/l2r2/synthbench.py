"""Synthetic FG/BG/FULL logit datasets with a class-background correlation that breaks at test time.

Every sample has a class ``k`` and an environment ``e``. Each environment
"belongs" to class ``e mod C``. On train and val, a sample sits in its class's
home environment with probability ``rho`` and in a uniformly drawn other
environment otherwise; on test the class -> environment map is permuted first.

Logits per model seed::

    fg   = beta_fg * onehot(k)              + noise_fg
    bg   = beta_bg * onehot(e mod C)        + noise_bg
    full = fg + bg

Randomness: numpy ``Philox`` (4x64, 10 rounds) keyed through
``SeedSequence([seed, stream, split_index, model_seed])``, Gaussians from
``Generator.standard_normal``. Output files are byte-identical for a fixed config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_data import (
    DatasetManifest,
    LabelTable,
    LogitTable,
    MetadataTable,
    ValidationError,
    save_labels,
    save_logits,
    save_manifest,
    save_metadata,
)

__all__ = ["SynthConfig", "SynthSplit", "simulate", "generate", "GOLDEN"]

SPLITS = ("train", "val", "test")
VIEWS = ("fg", "bg", "full")
_STREAM_LAYOUT, _STREAM_NOISE = 0, 1


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    num_envs: int | None = None
    per_class: int = 500
    rho: float = 1.0
    beta_fg: float = 4.0
    beta_bg: float = 4.0
    noise: float = 1.0
    test_permutation: tuple[int, ...] | None = None
    adversarial: bool = True
    seed: int = 0
    n_seeds: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.num_envs is not None and self.num_envs < self.num_classes:
            raise ValidationError("num_envs must be >= num_classes")
        if self.per_class < 1:
            raise ValidationError("per_class must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError("rho must lie in [0, 1]")
        if self.beta_fg < 0 or self.beta_bg < 0:
            raise ValidationError("signal strengths must be >= 0")
        if not self.noise > 0:
            raise ValidationError("noise scale must be > 0")
        if self.n_seeds < 1:
            raise ValidationError("n_seeds must be >= 1")
        if self.test_permutation is not None:
            perm = tuple(int(p) for p in self.test_permutation)
            if sorted(perm) != list(range(self.envs)):
                raise ValidationError(f"test_permutation must permute range({self.envs})")
            if self.adversarial and any(p == i for i, p in enumerate(perm)):
                raise ValidationError("adversarial shift requires a derangement")
            object.__setattr__(self, "test_permutation", perm)

    @property
    def envs(self) -> int:
        return self.num_envs or self.num_classes

    def permutation(self) -> np.ndarray:
        """Test-time environment permutation (identity when ``adversarial`` is off and none is given)."""
        if self.test_permutation is not None:
            return np.array(self.test_permutation)
        E = self.envs
        if not self.adversarial:
            return np.arange(E)
        rng = _rng(self.seed, _STREAM_LAYOUT, 99)
        while True:
            perm = rng.permutation(E)
            if np.all(perm != np.arange(E)):
                return perm


GOLDEN = SynthConfig(num_classes=4, per_class=500, rho=1.0, beta_fg=4.0, beta_bg=4.0, noise=1.0, seed=7)


@dataclass(frozen=True)
class SynthSplit:
    ids: tuple[str, ...]
    labels: np.ndarray
    envs: np.ndarray
    logits: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def view(self, name: str, model_seed: int = 0) -> np.ndarray:
        return self.logits[name][model_seed]


def _layout(cfg: SynthConfig, split_index: int, env_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(cfg.seed, _STREAM_LAYOUT, split_index)
    C, E = cfg.num_classes, cfg.envs
    labels = np.repeat(np.arange(C), cfg.per_class)
    labels = labels[rng.permutation(labels.size)]
    home = env_map[labels]
    stay = rng.random(labels.size) < cfg.rho
    # uniform over the E-1 environments other than home
    other = rng.integers(0, E - 1, size=labels.size)
    other = other + (other >= home)
    return labels, np.where(stay, home, other)


def simulate(cfg: SynthConfig) -> dict[str, SynthSplit]:
    C = cfg.num_classes
    home = np.arange(C)  # class k lives in environment k
    perm = cfg.permutation()
    out = {}
    for s, split in enumerate(SPLITS):
        env_map = perm[home] if split == "test" else home
        labels, envs = _layout(cfg, s, env_map)
        n = labels.size
        fg_signal = cfg.beta_fg * np.eye(C)[labels]
        bg_signal = cfg.beta_bg * np.eye(C)[envs % C]
        logits: dict[str, list[np.ndarray]] = {v: [] for v in VIEWS}
        for m in range(cfg.n_seeds):
            rng = _rng(cfg.seed, _STREAM_NOISE, s, m)
            fg = fg_signal + cfg.noise * rng.standard_normal((n, C))
            bg = bg_signal + cfg.noise * rng.standard_normal((n, C))
            logits["fg"].append(fg)
            logits["bg"].append(bg)
            logits["full"].append(fg + bg)
        ids = tuple(f"{split}_{i:06d}" for i in range(n))
        out[split] = SynthSplit(ids, labels, envs, logits)
    return out


def generate(cfg: SynthConfig, out_dir: str | Path, seed: int | None = None) -> Path:
    """Write manifest, labels, logits and environment metadata; returns the manifest path."""
    if seed is not None:
        cfg = SynthConfig(**{**cfg.__dict__, "seed": seed})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = simulate(cfg)
    seeds = tuple(str(m) for m in range(cfg.n_seeds))
    views = {v: {s: {} for s in SPLITS} for v in VIEWS}
    splits = {}
    meta_ids, meta_vals = [], []
    for split, d in data.items():
        labels_path = out / f"labels_{split}.csv"
        save_labels(labels_path, LabelTable(d.ids, d.labels))
        splits[split] = labels_path
        for v in VIEWS:
            for m in range(cfg.n_seeds):
                p = out / f"{v}_{split}_seed{m}.csv"
                save_logits(p, LogitTable(d.ids, d.view(v, m)))
                views[v][split][str(m)] = p
        meta_ids.extend(d.ids)
        meta_vals.extend(f"env{e}" for e in d.envs)
    meta_path = out / "metadata.csv"
    save_metadata(meta_path, MetadataTable(tuple(meta_ids), {"environment": tuple(meta_vals)}))
    manifest = DatasetManifest(
        name=f"synth_c{cfg.num_classes}_rho{cfg.rho}_seed{cfg.seed}",
        num_classes=cfg.num_classes,
        class_names=tuple(f"class{k}" for k in range(cfg.num_classes)),
        seeds=seeds,
        views=views,
        splits=splits,
        metadata_path=meta_path,
        metadata_columns=("environment",),
        root=out,
    )
    path = out / "manifest.json"
    save_manifest(path, manifest)
    return path
