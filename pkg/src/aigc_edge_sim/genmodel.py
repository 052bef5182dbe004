"""Prompt-engineering strategy space and a synthetic generation-quality oracle.

Image generation and LLM scoring are replaced by a per-(prompt class,
strategy) Gaussian on the 0-10 score scale. Transmission loss shrinks the
score multiplicatively, in proportion to BER, prompt complexity and a
per-strategy sensitivity (detailed prompts yield detailed images, which
suffer more from bit errors).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from itertools import permutations
from pathlib import Path

import numpy as np

from .channel import ChannelParams, expected_ber_shadowed
from .errors import InvalidArgument, NotFound

N_STRATEGIES = 7
RAW_PROMPT = 0
EMPIRICAL_BEST = 6
SCORE_MAX = 10.0


def count_optimized_prompts(corpus_size: int) -> int:
    """Number of suffix arrangements: ``sum_k L!/(L-k)!`` for k = 0..L."""
    if corpus_size < 0:
        raise InvalidArgument("corpus size must be non-negative")
    return sum(math.perm(corpus_size, k) for k in range(corpus_size + 1))


def enumerate_optimized_prompts(corpus_size: int):
    """Every ordered suffix selection, as index tuples (the raw prompt is ``()``)."""
    items = range(corpus_size)
    for k in range(corpus_size + 1):
        yield from permutations(items, k)


@dataclass
class StrategyCatalog:
    strategies: list[str]
    classes: list[str]
    mean: np.ndarray  # (n_classes, n_strategies)
    std: np.ndarray  # (n_classes, n_strategies)
    sensitivity: np.ndarray  # (n_strategies,)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        self.std = np.broadcast_to(std, self.mean.shape).copy()
        self.sensitivity = np.asarray(self.sensitivity, dtype=np.float64)
        shape = (len(self.classes), len(self.strategies))
        if self.mean.shape != shape:
            raise InvalidArgument(f"mean table has shape {self.mean.shape}, expected {shape}")
        if self.sensitivity.shape != (shape[1],):
            raise InvalidArgument("one sensitivity per strategy required")
        if np.any(self.std < 0) or np.any(self.sensitivity < 0):
            raise InvalidArgument("std and sensitivity must be non-negative")

    @property
    def n_strategies(self) -> int:
        return len(self.strategies)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def check_strategy(self, strategy: int) -> None:
        if not 0 <= strategy < self.n_strategies:
            raise InvalidArgument(f"unknown strategy {strategy}")

    def to_dict(self) -> dict:
        std = self.std
        return {
            "strategies": list(self.strategies),
            "classes": list(self.classes),
            "mean": self.mean.tolist(),
            "std": float(std.flat[0]) if np.all(std == std.flat[0]) else std.tolist(),
            "sensitivity": self.sensitivity.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StrategyCatalog":
        unknown = set(doc) - {"strategies", "classes", "mean", "std", "sensitivity"}
        if unknown:
            raise InvalidArgument(f"unknown catalog keys: {sorted(unknown)}")
        n = len(doc["strategies"])
        return cls(doc["strategies"], doc["classes"], doc["mean"], doc["std"], doc.get("sensitivity", [1.0] * n))


def load_catalog(path=None) -> StrategyCatalog:
    """Load a catalog JSON file; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("aigc_edge_sim.data").joinpath("default_catalog.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return StrategyCatalog.from_dict(json.loads(text))


@dataclass
class PromptSpec:
    id: int
    class_id: int
    complexity: float
    quality_threshold: float
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.complexity <= 1.0:
            raise InvalidArgument("complexity must lie in [0, 1]")
        if not 0.0 <= self.quality_threshold <= SCORE_MAX:
            raise InvalidArgument("quality threshold must lie in [0, 10]")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "class_id": self.class_id,
            "complexity": self.complexity,
            "quality_threshold": self.quality_threshold,
            "embedding": self.embedding.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PromptSpec":
        return cls(doc["id"], doc["class_id"], doc["complexity"], doc["quality_threshold"], doc["embedding"])


def embed_prompt(class_id: int, complexity: float, seed: int = 0, dim: int = 8) -> np.ndarray:
    """Seeded random unit vector for the class, with ``complexity`` appended (total length ``dim``)."""
    if dim < 2:
        raise InvalidArgument("embedding dimension must be >= 2")
    rng = np.random.default_rng([seed, class_id])
    v = rng.standard_normal(dim - 1)
    v /= np.linalg.norm(v)
    return np.append(v, complexity)


def make_prompt(pid: int, class_id: int, complexity: float, threshold: float = 8.0,
                embed_seed: int = 0, dim: int = 8) -> PromptSpec:
    return PromptSpec(pid, class_id, complexity, threshold, embed_prompt(class_id, complexity, embed_seed, dim))


def make_demo_prompts(n: int, catalog: StrategyCatalog, rng: np.random.Generator,
                      embed_seed: int = 0, dim: int = 8) -> list[PromptSpec]:
    """``n`` demonstration prompts cycling through every class, random complexity in [0.2, 1]."""
    if n < 1:
        raise InvalidArgument("need at least one prompt")
    complexities = rng.uniform(0.2, 1.0, size=n)
    return [make_prompt(i, i % catalog.n_classes, float(round(c, 6)), 8.0, embed_seed, dim)
            for i, c in enumerate(complexities)]


def raw_quality(catalog: StrategyCatalog, prompt: PromptSpec, strategy: int,
                rng: np.random.Generator, size=None):
    """Generation-quality draw ``clip(Normal(mu, sigma), 0, 10)`` for one prompt/strategy."""
    catalog.check_strategy(strategy)
    mu = catalog.mean[prompt.class_id, strategy]
    sigma = catalog.std[prompt.class_id, strategy]
    return np.clip(mu + sigma * rng.standard_normal(size), 0.0, SCORE_MAX)


def user_side_score(raw_score, ber, complexity, kappa: float):
    """Score after transmission: ``raw * max(0, 1 - kappa * complexity * ber)``."""
    return np.asarray(raw_score) * np.maximum(0.0, 1.0 - kappa * complexity * np.asarray(ber))


def degradation_factor(catalog: StrategyCatalog, prompt: PromptSpec, strategy: int, ber: float, kappa: float) -> float:
    return float(user_side_score(1.0, ber, prompt.complexity, kappa * catalog.sensitivity[strategy]))


def expected_user_score(catalog: StrategyCatalog, prompt: PromptSpec, strategy: int, ber: float, kappa: float) -> float:
    """Mean user-side score, ignoring the (rarely active) clip at 0 and 10."""
    return catalog.mean[prompt.class_id, strategy] * degradation_factor(catalog, prompt, strategy, ber, kappa)


def best_expected_strategy(catalog: StrategyCatalog, prompt: PromptSpec, ber: float, kappa: float) -> int:
    scores = [expected_user_score(catalog, prompt, k, ber, kappa) for k in range(catalog.n_strategies)]
    return int(np.argmax(scores))


@dataclass
class DemoRecord:
    power: float
    prompt_id: int
    strategy_id: int
    corpus_tag: str
    score: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DemoDataset:
    records: list[DemoRecord]
    power_grid: list[float]
    prompts: list[PromptSpec]

    def prompt(self, pid: int) -> PromptSpec:
        for p in self.prompts:
            if p.id == pid:
                return p
        raise NotFound(f"prompt {pid} not in dataset")

    def score_table(self) -> np.ndarray:
        """Scores indexed ``[prompt position, power index, strategy]``."""
        pos = {p.id: i for i, p in enumerate(self.prompts)}
        pidx = {pw: j for j, pw in enumerate(self.power_grid)}
        n_str = 1 + max(r.strategy_id for r in self.records)
        table = np.full((len(self.prompts), len(self.power_grid), n_str), np.nan)
        for r in self.records:
            table[pos[r.prompt_id], pidx[r.power], r.strategy_id] = r.score
        return table

    def write(self, path) -> None:
        """Records as NDJSON at ``path``; prompts and grid in ``<path>.meta.json``."""
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict()) + "\n")
        meta = {"power_grid": self.power_grid, "prompts": [p.to_dict() for p in self.prompts]}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DemoDataset":
        path = Path(path)
        records = [DemoRecord(**json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line]
        meta = json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
        return cls(records, meta["power_grid"], [PromptSpec.from_dict(p) for p in meta["prompts"]])


def build_demo_dataset(prompts, catalog: StrategyCatalog, power_grid, channel: ChannelParams,
                       rng: np.random.Generator, distance: float = 10.0, kappa: float = 4.0) -> DemoDataset:
    """One record per (prompt, strategy, power).

    Each (prompt, strategy) pair gets a single generated-quality draw which is
    then degraded at every power level, mirroring "generate once, transmit at
    each candidate power".
    """
    prompts = list(prompts)
    grid = [float(p) for p in power_grid]
    if not prompts or not grid or catalog.n_strategies == 0:
        raise InvalidArgument("prompts, power grid and catalog must be non-empty")
    if any(not 0 < p <= channel.p_total for p in grid):
        raise InvalidArgument("grid powers must lie in (0, p_total]")
    bers = [expected_ber_shadowed(channel, p, distance) for p in grid]
    records = []
    for prompt in prompts:
        for k in range(catalog.n_strategies):
            raw = float(raw_quality(catalog, prompt, k, rng))
            for p, ber in zip(grid, bers):
                kap = kappa * catalog.sensitivity[k]
                score = float(user_side_score(raw, ber, prompt.complexity, kap))
                records.append(DemoRecord(p, prompt.id, k, f"corpus-{prompt.id}", score))
    return DemoDataset(records, grid, prompts)


class ExpertPolicy:
    """Per-(prompt, power cell) argmax of recorded user-side score; lowest id wins ties."""

    def __init__(self, dataset: DemoDataset):
        if not dataset.records:
            raise InvalidArgument("empty dataset")
        self.power_grid = np.asarray(dataset.power_grid)
        self._pos = {p.id: i for i, p in enumerate(dataset.prompts)}
        table = dataset.score_table()
        self.table = table
        # np.argmax returns the first maximum, which is the lowest strategy id
        filled = np.where(np.isnan(table), -np.inf, table)
        self.choice = np.argmax(filled, axis=2)
        self.missing = np.all(np.isnan(table), axis=2)

    def bucket(self, power: float) -> int:
        return int(np.argmin(np.abs(self.power_grid - power)))

    def lookup(self, prompt_id: int, power: float) -> int:
        if prompt_id not in self._pos:
            raise NotFound(f"prompt {prompt_id} has no demonstrations")
        i, j = self._pos[prompt_id], self.bucket(power)
        if self.missing[i, j]:
            raise NotFound(f"no records for prompt {prompt_id} at power {self.power_grid[j]}")
        return int(self.choice[i, j])

    def as_mapping(self) -> dict[tuple[int, float], int]:
        out = {}
        for pid, i in self._pos.items():
            for j, p in enumerate(self.power_grid):
                if not self.missing[i, j]:
                    out[(pid, float(p))] = int(self.choice[i, j])
        return out


def expert_policy(dataset: DemoDataset) -> ExpertPolicy:
    return ExpertPolicy(dataset)
