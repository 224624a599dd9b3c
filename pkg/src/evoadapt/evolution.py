"""Population-based search over candidate adaptation algorithms.

The loop follows the classic recipe: seed with a known algorithm, generate
offspring through LLM-backed crossover and mutation, evaluate them on the
holdout tasks, keep the lowest-fitness survivors.  Failed candidates are
dropped (never enter the population) and show up only in the error-rate
telemetry and the archive.

All randomness flows through one generator seeded from
(search seed, round, stage), and offspring are proposed sequentially on the
control loop, so a scripted gateway makes an entire search bit-reproducible.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeds
from .errors import (
    EmptyPopulation,
    ExecutionError,
    InvalidCombination,
    NoCode,
    NoThoughts,
    NoViableCandidates,
    ParseExhausted,
)
from .fabric import code_digest
from .gateway import ParentAlgorithm, PromptSpec, build_prompt, parse_algorithm
from .rewriter import to_half_precision

PARSE_ATTEMPTS = 3


@dataclass
class Individual:
    ident: int
    stage: str
    thoughts: str
    code: str
    operator: str                       # seed | crossover | mutation
    parents: tuple[int, ...] = ()
    fitness: Optional[float] = None
    error: Optional[str] = None
    code_hash: str = ""

    def __post_init__(self):
        if not self.code:
            raise ValueError("individual code must be non-empty")
        if not self.code_hash:
            self.code_hash = code_digest(self.code)

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None

    def as_record(self) -> dict:
        return {
            "id": self.ident,
            "stage": self.stage,
            "operator": self.operator,
            "parents": list(self.parents),
            "thoughts": self.thoughts,
            "code": self.code,
            "fitness": self.fitness,
            "error": self.error,
            "code_hash": self.code_hash,
        }


@dataclass
class Population:
    capacity: int
    members: list[Individual] = field(default_factory=list)

    def __post_init__(self):
        self._sort()

    def _sort(self) -> None:
        # ascending fitness; ties go to the earlier-created individual
        self.members.sort(key=lambda ind: (ind.fitness, ind.ident))

    def best(self) -> Individual:
        if not self.members:
            raise EmptyPopulation("population is empty")
        return self.members[0]

    def fitnesses(self) -> list[float]:
        return [ind.fitness for ind in self.members]


def select_survivors(pool: Sequence[Individual], capacity: int) -> Population:
    """Keep the `capacity` lowest-fitness individuals; older ones win ties."""
    for ind in pool:
        if not ind.evaluated:
            raise ValueError(f"individual {ind.ident} is unevaluated")
    ranked = sorted(pool, key=lambda ind: (ind.fitness, ind.ident))
    return Population(capacity=capacity, members=ranked[:capacity])


def sample_parents(pop: Population, m: int, rng: np.random.Generator) -> list[Individual]:
    """Rank-based sampling, p_i proportional to 1/(rank_i + capacity), rank 1 = best.

    Draws are without replacement when the population is large enough,
    otherwise with replacement.
    """
    n = len(pop.members)
    if n == 0:
        raise EmptyPopulation("cannot sample parents from an empty population")
    if m < 1:
        raise ValueError("m must be >= 1")
    weights = 1.0 / (np.arange(1, n + 1) + pop.capacity)
    probs = weights / weights.sum()
    idx = rng.choice(n, size=m, replace=n < m, p=probs)
    return [pop.members[i] for i in idx]


@dataclass
class IterationStats:
    iteration: int
    min_fitness: float
    mean_fitness: float
    population: list[float]
    population_ids: list[int] = field(default_factory=list)
    attempted: int = 0
    errors: int = 0
    parse_failures: int = 0
    tokens_in: int = 0
    tokens_out: int = 0


@dataclass
class StageHistory:
    stage: str
    init: str
    round: int = 0
    iterations: list[IterationStats] = field(default_factory=list)
    archive: list[Individual] = field(default_factory=list)

    def min_curve(self) -> list[float]:
        return [it.min_fitness for it in self.iterations]

    def attempted(self) -> int:
        return sum(it.attempted for it in self.iterations)

    def errors(self) -> int:
        return sum(it.errors for it in self.iterations)

    def error_rate(self) -> float:
        attempted = self.attempted()
        return self.errors() / attempted if attempted else 0.0

    def tokens(self) -> tuple[int, int]:
        return (sum(it.tokens_in for it in self.iterations),
                sum(it.tokens_out for it in self.iterations))


@dataclass
class SearchConfig:
    strategy: str = "fs_then_logit"      # fs_then_logit | logit_then_fs | joint | logit_only
    init: str = "gda"                    # tip_adapter | ape | gda | none
    population_size: int = 10
    iterations: int = 10
    offspring_per_iter: int = 10
    alternations: int = 1
    seed: int = 0
    prompt_char_budget: int = 24000
    half_precision: bool = False
    eval_concurrency: int = 4

    def validate(self) -> None:
        if self.strategy not in ("fs_then_logit", "logit_then_fs", "joint", "logit_only"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.init not in seeds.INIT_CHOICES:
            raise ValueError(f"unknown init {self.init!r}")
        if min(self.population_size, self.iterations,
               self.offspring_per_iter, self.alternations) < 1:
            raise ValueError("population/iteration/offspring/alternation counts must be >= 1")


# evaluator contract: (code, stage, fixed_fs_code) -> fitness, raising
# ExecutionError subclasses on candidate failure
EvaluateFn = Callable[[str, str, Optional[str]], float]


class StageRunner:
    """One evolutionary stage: fixed counterpart code, one population."""

    def __init__(self, stage: str, config: SearchConfig, evaluate: EvaluateFn,
                 gateway, rng: np.random.Generator, id_counter,
                 fixed_fs_code: Optional[str] = None):
        self.stage = stage
        self.config = config
        self.evaluate = evaluate
        self.gateway = gateway
        self.rng = rng
        self.fixed_fs_code = fixed_fs_code
        self._next_id = id_counter
        self.history = StageHistory(stage=stage, init=config.init)

    def _new_individual(self, thoughts: str, code: str, operator: str,
                        parents: tuple[int, ...]) -> Individual:
        ind = Individual(ident=self._next_id(), stage=self.stage, thoughts=thoughts,
                         code=code, operator=operator, parents=parents)
        self.history.archive.append(ind)
        return ind

    def init_population(self, seed_algorithms: Sequence[seeds.SeedAlgorithm]) -> Population:
        members = []
        for seed_alg in seed_algorithms:
            ind = self._new_individual(seed_alg.thoughts, seed_alg.code, "seed", ())
            ind.fitness = self.evaluate(ind.code, self.stage, self.fixed_fs_code)
            members.append(ind)
        return Population(capacity=self.config.population_size, members=members)

    def propose_offspring(self, pop: Population, kind: str) -> Individual:
        """Build the prompt, query the gateway, parse; up to 3 attempts."""
        if pop.members:
            count = 2 if kind == "crossover" else 1
            parents = sample_parents(pop, count, self.rng)
        else:
            # no-init start: mutation-free crossover from the minimal stub
            stub = seeds.stage_stub(self.stage)
            stub_ind = Individual(ident=-1, stage=self.stage, thoughts=stub.thoughts,
                                  code=stub.code, operator="seed")
            parents = [stub_ind, stub_ind]
            kind = "crossover"
        spec = PromptSpec(
            operator=kind,
            stage=self.stage,
            parents=[ParentAlgorithm(p.thoughts, p.code) for p in parents],
            char_budget=self.config.prompt_char_budget,
        )
        prompt = build_prompt(spec)
        for _ in range(PARSE_ATTEMPTS):
            text, _ = self.gateway.complete(prompt)
            try:
                thoughts, code = parse_algorithm(text)
            except (NoThoughts, NoCode):
                continue
            if self.config.half_precision:
                code = to_half_precision(code)
            return self._new_individual(
                thoughts, code, kind, tuple(p.ident for p in parents)
            )
        raise ParseExhausted(f"no parsable {kind} response in {PARSE_ATTEMPTS} attempts")

    def _evaluate_batch(self, offspring: list[Individual]) -> list[Individual]:
        """Concurrent evaluation; returns the survivors in proposal order."""

        def run(ind: Individual):
            try:
                ind.fitness = self.evaluate(ind.code, self.stage, self.fixed_fs_code)
            except ExecutionError as exc:
                ind.error = f"{exc.kind}: {exc}"

        with ThreadPoolExecutor(max_workers=self.config.eval_concurrency) as pool:
            list(pool.map(run, offspring))
        return [ind for ind in offspring if ind.evaluated]

    def run(self, seed_algorithms: Sequence[seeds.SeedAlgorithm]) -> tuple[Individual, StageHistory]:
        config = self.config
        pop = self.init_population(seed_algorithms)
        for iteration in range(1, config.iterations + 1):
            tokens_before = self.gateway.usage.snapshot()
            offspring: list[Individual] = []
            parse_failures = 0
            for j in range(config.offspring_per_iter):
                kind = "crossover" if j < (config.offspring_per_iter + 1) // 2 else "mutation"
                try:
                    offspring.append(self.propose_offspring(pop, kind))
                except ParseExhausted:
                    parse_failures += 1
            survivors = self._evaluate_batch(offspring)
            pop = select_survivors(pop.members + survivors, config.population_size)
            _, tin0, tout0 = tokens_before
            _, tin1, tout1 = self.gateway.usage.snapshot()
            self.history.iterations.append(IterationStats(
                iteration=iteration,
                min_fitness=pop.best().fitness,
                mean_fitness=float(np.mean(pop.fitnesses())),
                population=pop.fitnesses(),
                population_ids=[ind.ident for ind in pop.members],
                attempted=len(offspring),
                errors=len(offspring) - len(survivors),
                parse_failures=parse_failures,
                tokens_in=tin1 - tin0,
                tokens_out=tout1 - tout0,
            ))
        if not pop.members:
            raise NoViableCandidates(f"stage {self.stage} ended with an empty population")
        return pop.best(), self.history


@dataclass
class SearchResult:
    fs: Optional[Individual]            # None when no selection component exists
    lg: Individual
    histories: list[StageHistory]

    def archive_records(self) -> list[dict]:
        return [ind.as_record() for h in self.histories for ind in h.archive]


def _stage_plan(strategy: str) -> list[str]:
    return {
        "fs_then_logit": ["feature_selection", "logits_computation"],
        "logit_then_fs": ["logits_computation", "feature_selection"],
        "joint": ["joint"],
        "logit_only": ["logits_computation"],
    }[strategy]


def run_search(config: SearchConfig, evaluate: EvaluateFn, gateway) -> SearchResult:
    """Drive the configured strategy, threading the best pair between stages.

    Selection stages are always scored through the reference cache-logits
    function; logits stages run against the best selection code found so far
    (or the initializer's, or none for initializers without selection).
    """
    config.validate()
    if config.init == "none" and config.strategy in ("joint", "logit_only"):
        raise InvalidCombination(f"{config.strategy} requires an initializer")

    counter = _Counter()
    histories: list[StageHistory] = []

    best_fs: Optional[Individual] = None
    best_lg: Optional[Individual] = None
    # the initializer's native selection, used by logits stages until a
    # selection stage has produced something better
    init_fs_code = seeds.APE_FS_CODE if config.init == "ape" else None

    for round_idx in range(config.alternations):
        for stage_ordinal, stage in enumerate(_stage_plan(config.strategy)):
            rng = np.random.default_rng([config.seed, round_idx, stage_ordinal])
            if stage == "feature_selection":
                fixed_fs = None
            elif best_fs is not None:
                fixed_fs = best_fs.code
            else:
                fixed_fs = init_fs_code

            runner = StageRunner(stage, config, evaluate, gateway, rng,
                                 counter.next, fixed_fs_code=fixed_fs)
            runner.history.round = round_idx

            carried = best_fs if stage == "feature_selection" else best_lg
            if carried is not None:
                seed_algorithms = [seeds.SeedAlgorithm(stage, "carried",
                                                       carried.thoughts, carried.code)]
            elif config.init == "none":
                seed_algorithms = []
            elif stage == "feature_selection":
                seed_algorithms = [seeds.initial_algorithm(stage, "ape")]
            else:
                seed_algorithms = [seeds.initial_algorithm(stage, config.init)]

            best, history = runner.run(seed_algorithms)
            histories.append(history)
            if stage == "feature_selection":
                best_fs = best
            else:
                best_lg = best

    assert best_lg is not None
    return SearchResult(fs=best_fs, lg=best_lg, histories=histories)


class _Counter:
    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            value = self._value
            self._value += 1
        return value
