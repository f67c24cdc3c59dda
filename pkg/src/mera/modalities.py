"""Synthetic modality-task data, replay sampling and replay corruption.

Every modality renders the same latent task: a latent ``z ~ N(0, I)`` is
labelled by two fixed rules shared across modalities (``capA`` and ``qaA``),
and each modality only differs in how ``z`` is turned into an observation,
``tanh(A_m z) + noise``.  Knowledge of the labelling rules can therefore live
in the shared backbone, and an old modality can be recovered by re-fitting
its connector alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mera.seeding import rng_for

TASKS = ("capA", "qaA")


@dataclass(frozen=True)
class ModalitySpec:
    modality_id: str
    input_dim: int
    render_seed: int
    noise_sigma: float = 0.02
    gain: float = 0.5

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ValueError(f"{self.modality_id}: input_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError(f"{self.modality_id}: noise_sigma must be non-negative")
        if self.gain <= 0:
            raise ValueError(f"{self.modality_id}: gain must be positive")


@dataclass(frozen=True)
class Split:
    x: np.ndarray  # [n, input_dim] float32
    y: np.ndarray  # [n] int64

    def __len__(self):
        return len(self.y)


@dataclass
class ModalityDataset:
    modality_id: str
    tasks: dict[str, dict[str, Split]]  # task -> {"train": Split, "test": Split}
    meta: dict = field(default_factory=dict)

    def train(self, task: str) -> Split:
        return self.tasks[task]["train"]

    def test(self, task: str) -> Split:
        return self.tasks[task]["test"]

    @property
    def train_size(self) -> int:
        return sum(len(t["train"]) for t in self.tasks.values())


def task_rules(global_task_seed: int, latent_dim: int,
               classes: dict[str, int]) -> dict[str, np.ndarray]:
    """One ``[C, latent]`` scoring matrix per task; label = argmax(W z).

    Rows are orthonormal when ``C <= latent`` so that every class receives the
    same probability mass under an isotropic latent.
    """
    rules = {}
    for task, c in classes.items():
        rng = rng_for(global_task_seed, "task-rule", task)
        g = rng.standard_normal((latent_dim, c))
        if c <= latent_dim:
            q, r = np.linalg.qr(g)
            rules[task] = (q * np.sign(np.diag(r))).T.copy()
        else:
            rules[task] = g.T / np.sqrt(latent_dim)
    return rules


def label(rule: np.ndarray, z: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index on ties.
    return np.argmax(z @ rule.T, axis=1).astype(np.int64)


def render_matrix(spec: ModalitySpec, latent_dim: int) -> np.ndarray:
    rng = rng_for(spec.render_seed, "render", spec.modality_id)
    return rng.standard_normal((spec.input_dim, latent_dim)) * (spec.gain / np.sqrt(latent_dim))


def render(spec: ModalitySpec, z: np.ndarray, noise_rng: np.random.Generator | None = None) -> np.ndarray:
    a = render_matrix(spec, z.shape[1])
    x = np.tanh(z @ a.T)
    if spec.noise_sigma > 0:
        if noise_rng is None:
            raise ValueError("noise_sigma > 0 needs a noise generator")
        x = x + spec.noise_sigma * noise_rng.standard_normal(x.shape)
    return x.astype(np.float32)


def encoder_corpus(spec: ModalitySpec, latent_dim: int, feat_dim: int, seed: int,
                   n: int = 8000) -> tuple[np.ndarray, np.ndarray]:
    """Unlabelled inputs paired with a modality-specific view of their latents.

    Stands in for the large corpus a real encoder is pretrained on.  The
    target is ``B_m z`` with ``B_m`` a random ``[feat, latent]`` matrix with
    orthonormal columns, so each modality's features live in their own basis
    and a connector still has to learn the map into the shared space.
    """
    if feat_dim < latent_dim:
        raise ValueError(f"feat_dim {feat_dim} < latent_dim {latent_dim}")
    rng = rng_for(seed, "encoder-corpus", spec.modality_id)
    z = rng.standard_normal((n, latent_dim))
    x = render(spec, z, rng)
    q, r = np.linalg.qr(rng.standard_normal((feat_dim, latent_dim)))
    basis = q * np.sign(np.diag(r))
    return x, (z @ basis.T).astype(np.float32)


def generate_modality(spec: ModalitySpec, latent_dim: int, sizes: dict[str, int] | tuple[int, int],
                      global_task_seed: int, classes: dict[str, int] | None = None,
                      data_seed: int = 0) -> ModalityDataset:
    if spec.input_dim < latent_dim:
        raise ValueError(f"{spec.modality_id}: input_dim {spec.input_dim} < latent_dim {latent_dim}")
    if isinstance(sizes, tuple):
        sizes = {"train": sizes[0], "test": sizes[1]}
    if any(v <= 0 for v in sizes.values()):
        raise ValueError(f"sizes must be positive, got {sizes}")
    classes = classes or {t: 8 for t in TASKS}
    rules = task_rules(global_task_seed, latent_dim, classes)
    tasks = {}
    for task in classes:
        tasks[task] = {}
        for split in ("train", "test"):
            # Train and test draw from distinct streams, so no latent is shared.
            zrng = rng_for(data_seed, "latent", spec.render_seed, spec.modality_id, task, split)
            nrng = rng_for(data_seed, "noise", spec.render_seed, spec.modality_id, task, split)
            z = zrng.standard_normal((sizes[split], latent_dim))
            tasks[task][split] = Split(render(spec, z, nrng), label(rules[task], z))
    meta = {"render_seed": spec.render_seed, "global_task_seed": global_task_seed,
            "data_seed": data_seed, "latent_dim": latent_dim, "sizes": dict(sizes),
            "classes": dict(classes), "noise_sigma": spec.noise_sigma}
    return ModalityDataset(spec.modality_id, tasks, meta)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplayGroup:
    modality_id: str
    task_id: str
    indices: np.ndarray  # positions in the source train split
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class ReplaySet:
    groups: list[ReplayGroup]
    fraction: float
    sources: list[str]
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(g) for g in self.groups)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for g in self.groups:
            out[g.modality_id] = out.get(g.modality_id, 0) + len(g)
        return out

    def index_sets(self) -> dict[tuple[str, str], list[int]]:
        return {(g.modality_id, g.task_id): g.indices.tolist() for g in self.groups}


def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    s = sum(weights)
    exact = [total * w / s for w in weights]
    base = [math.floor(e) for e in exact]
    left = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def _ceil_frac(r: float, n: int) -> int:
    # r * n is rounded first so 0.1 * 2000 does not ceil to 201.
    return math.ceil(round(r * n, 9))


def replay_from_indices(datasets: Sequence[ModalityDataset], index_sets: dict, fraction: float,
                        seed: int, labels: dict | None = None) -> ReplaySet:
    """Rebuild a replay set from explicit ``{(modality, task): [indices]}``.

    Groups keep the iteration order of ``index_sets``; pass them in the order
    they were sampled to reproduce a run exactly.  ``labels`` optionally
    replaces the targets of a group (mispaired sets store their labels).
    """
    by_id = {d.modality_id: d for d in datasets}
    groups = []
    for (m, task), idx in index_sets.items():
        if m not in by_id:
            raise KeyError(f"no dataset for modality {m!r}")
        idx = np.asarray(idx, dtype=np.int64)
        split = by_id[m].train(task)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(split)):
            raise IndexError(f"{m}/{task}: index out of range for {len(split)} rows")
        y = split.y[idx]
        if labels is not None and (m, task) in labels:
            y = np.asarray(labels[(m, task)], dtype=y.dtype)
            if y.shape != idx.shape:
                raise ValueError(f"{m}/{task}: {len(y)} labels for {len(idx)} indices")
        groups.append(ReplayGroup(m, task, idx, split.x[idx], y))
    sources = [d.modality_id for d in datasets if d.modality_id in {m for m, _ in index_sets}]
    return ReplaySet(groups, fraction, sources, seed)


def sample_replay(datasets: Sequence[ModalityDataset], r: float, seed: int,
                  include_current: bool = True) -> ReplaySet:
    """Draw ``r`` of the pooled train data, allocated proportionally per modality.

    With ``include_current=False`` the last dataset (the modality currently
    being learned) is excluded, which is the classic rehearsal buffer; the
    default includes it, as needed before realigning connectors.
    Every source modality keeps at least one sample.
    """
    if not 0 < r <= 1:
        raise ValueError(f"replay fraction must be in (0, 1], got {r}")
    sources = list(datasets) if include_current else list(datasets)[:-1]
    if not sources:
        return ReplaySet([], r, [], seed)
    sizes = [d.train_size for d in sources]
    target = _ceil_frac(r, sum(sizes))
    per_mod = [max(1, c) for c in _largest_remainder(target, sizes)]
    groups = []
    for d, n_m in zip(sources, per_mod):
        tasks = list(d.tasks)
        per_task = _largest_remainder(n_m, [len(d.train(t)) for t in tasks])
        for task, n in zip(tasks, per_task):
            if n == 0:
                continue
            split = d.train(task)
            rng = rng_for(seed, "replay", d.modality_id, task)
            idx = np.sort(rng.choice(len(split), size=n, replace=False)).astype(np.int64)
            groups.append(ReplayGroup(d.modality_id, task, idx, split.x[idx], split.y[idx]))
    return ReplaySet(groups, r, [d.modality_id for d in sources], seed)


def corrupt_mispair(replay: ReplaySet, p: float, seed: int) -> ReplaySet:
    """Give ``floor(p * |replay|)`` samples the label of another sample of the same task."""
    if not 0 <= p <= 1:
        raise ValueError(f"corruption fraction must be in [0, 1], got {p}")
    n_total = len(replay)
    n_bad = math.floor(round(p * n_total, 9))
    if n_bad == 0:
        return ReplaySet(list(replay.groups), replay.fraction, list(replay.sources), replay.seed,
                         dict(replay.meta, corrupted=[]))
    rng = rng_for(seed, "mispair")
    # flat position -> (group index, row)
    flat = [(gi, row) for gi, g in enumerate(replay.groups) for row in range(len(g))]
    by_task: dict[str, list[int]] = {}
    for pos, (gi, _) in enumerate(flat):
        by_task.setdefault(replay.groups[gi].task_id, []).append(pos)
    chosen = np.sort(rng.choice(n_total, size=n_bad, replace=False))
    new_y = [g.y.copy() for g in replay.groups]
    for pos in chosen:
        gi, row = flat[pos]
        pool = by_task[replay.groups[gi].task_id]
        if len(pool) < 2:
            continue
        other = pos
        while other == pos:
            other = pool[int(rng.integers(len(pool)))]
        ogi, orow = flat[other]
        new_y[gi][row] = replay.groups[ogi].y[orow]
    groups = [ReplayGroup(g.modality_id, g.task_id, g.indices, g.x, y)
              for g, y in zip(replay.groups, new_y)]
    return ReplaySet(groups, replay.fraction, list(replay.sources), replay.seed,
                     dict(replay.meta, corrupted=chosen.tolist(), corruption_p=p))
