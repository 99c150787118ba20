"""Simulation models, support trimming and repeated-trial rejection tables."""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import classification, permutation
from .data import Dataset
from .errors import DataError, GencdetError, InvalidSpecError, PreconditionError
from .mdn import MdnSpec, TrainingConfig

BETA = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
MU_SHIFT = np.array([1.0, 1.0, -1.0, -1.0, 0.0])

# (d, p, MDN hidden widths, mixture count, classifier hidden widths)
MODEL_SETTINGS = {
    1: (5, 1, (8, 4), 2, (32,)),
    2: (5, 1, (8, 4), 2, (32,)),
    3: (5, 1, (32, 16), 2, (64,)),
    4: (10, 1, (32, 16), 2, (512,)),
    5: (10, 1, (64, 32), 8, (32,)),
    6: (100, 1, (1024, 512), 2, (64,)),
    7: (5, 2, (8, 4), 2, (32,)),
}

TESTS = ("gp-cdet", "adaptive-gp-cdet", "gca-cdet-nn", "gca-cdet-llr", "oracle-nn", "oracle-llr")
TEST_ALIASES = {
    "gp": "gp-cdet",
    "gp-adaptive": "adaptive-gp-cdet",
    "gca-nn": "gca-cdet-nn",
    "gca-llr": "gca-cdet-llr",
}


def canonical_test(name: str) -> str:
    name = TEST_ALIASES.get(name, name)
    if name not in TESTS:
        raise InvalidSpecError(f"unknown test {name!r}; choose from {sorted(TESTS + tuple(TEST_ALIASES))}")
    return name


def _uniform_mixture(rng, n, d):
    # Unif(([-1, -0.5] U [0.5, 1])^d)
    return rng.uniform(0.5, 1.0, size=(n, d)) * rng.choice([-1.0, 1.0], size=(n, d))


def _donut(rng, n):
    r = rng.uniform(0.5, 1.0, size=(n, 5))
    u = rng.uniform(0.0, 2.0 * np.pi, size=(n, 5))
    x = np.empty((n, 10))
    x[:, 0::2] = r * np.sin(u)
    x[:, 1::2] = r * np.cos(u)
    return x


def draw_covariates(model: int, sample: int, n: int, rng) -> np.ndarray:
    """Covariates of sample 1 or 2 for the given model."""
    d = MODEL_SETTINGS[model][0]
    if sample == 1:
        return rng.standard_normal((n, d))
    if model == 1:
        return rng.standard_normal((n, d)) + MU_SHIFT
    if model == 5:
        return _donut(rng, n)
    return _uniform_mixture(rng, n, d)


def regression_function(model: int, x: np.ndarray) -> np.ndarray:
    """Conditional mean of Y given X at shift zero, shape (n, p)."""
    if model in (1, 2):
        return (x @ BETA)[:, None]
    if model == 3:
        return (np.exp(x[:, 0] / 2 + x[:, 1] / 2) - x[:, 2] * np.sin(x[:, 3] + x[:, 4]))[:, None]
    if model in (4, 6):
        return (x[:, 0] ** 2 + np.exp(x[:, 1] + x[:, 2] / 3) + x[:, 3] - x[:, 4])[:, None]
    if model == 5:
        r2 = x[:, 0::2] ** 2 + x[:, 1::2] ** 2
        return (r2 * np.sin(r2) @ BETA)[:, None]
    if model == 7:
        # E[(u / 2pi) sin 2u] = -1 / (4 pi) and E[(u / 2pi) cos 2u] = 0 for u ~ Unif[0, 2pi]
        lin = x @ BETA
        return np.column_stack([lin - 1.0 / (4.0 * np.pi), lin])
    raise InvalidSpecError(f"unknown model {model}")


def draw_responses(model: int, x: np.ndarray, shift: float, rng) -> np.ndarray:
    """Y | X = x for the model with intercept ``shift``; returns (n, p)."""
    n = x.shape[0]
    if model in (1, 2, 3, 5):
        return regression_function(model, x) + shift + rng.standard_normal((n, 1))
    if model in (4, 6):
        scale = 0.5 + x[:, 5] ** 2 / 2 + x[:, 6] ** 2 / 2
        return regression_function(model, x) + shift + (scale * rng.standard_normal(n))[:, None]
    if model == 7:
        u = rng.uniform(0.0, 2.0 * np.pi, size=n)
        eps = 0.1 * rng.standard_normal((n, 2))
        lin = x @ BETA + shift
        return np.column_stack(
            [
                lin + u / (2 * np.pi) * np.sin(2 * u) + eps[:, 0],
                lin + u / (2 * np.pi) * np.cos(2 * u) + eps[:, 1],
            ]
        )
    raise InvalidSpecError(f"unknown model {model}")


def alternative_shift(model: int) -> float:
    return 1.0 if model == 6 else 0.5


def true_generator(model: int):
    """Sampler of the first sample's conditional law, for oracle tests."""

    def sampler(x, rng):
        return draw_responses(model, np.asarray(x, dtype=np.float64), 0.0, rng)

    return sampler


@dataclass(frozen=True)
class SimulationSpec:
    model: int = 1
    regime: str = "null"
    n1: int = 1000
    n2: int = 1000
    trials: int = 100
    base_seed: int = 0
    test: str = "gca-cdet-nn"
    alpha: float = 0.05
    n_perm: int = 300
    trim: bool = True
    workers: int = 1
    n_components: int | None = None
    mdn_hidden: tuple | None = None
    classifier_hidden: tuple | None = None
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20

    def __post_init__(self):
        if self.model not in MODEL_SETTINGS:
            raise InvalidSpecError(f"model must be one of 1..7, got {self.model}")
        if self.regime not in ("null", "alternative"):
            raise InvalidSpecError("regime must be 'null' or 'alternative'")
        object.__setattr__(self, "test", canonical_test(self.test))
        if self.n1 < 1 or self.n2 < 1 or self.trials < 0:
            raise InvalidSpecError("n1, n2 must be positive and trials non-negative")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidSpecError("alpha must lie in (0, 1)")

    @property
    def d(self) -> int:
        return MODEL_SETTINGS[self.model][0]

    @property
    def p(self) -> int:
        return MODEL_SETTINGS[self.model][1]

    @property
    def shift(self) -> float:
        return 0.0 if self.regime == "null" else alternative_shift(self.model)

    def mdn_spec(self) -> MdnSpec:
        d, p, hidden, g, _ = MODEL_SETTINGS[self.model]
        return MdnSpec.build(
            p,
            d,
            self.n_components or g,
            self.mdn_hidden or hidden,
            training=TrainingConfig(batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience),
        )

    def classifier_spec(self) -> classification.ClassifierSpec:
        if self.test.endswith("llr"):
            return classification.ClassifierSpec.linear()
        return classification.ClassifierSpec(hidden_widths=self.classifier_hidden or MODEL_SETTINGS[self.model][4])


def generate_model(spec: SimulationSpec, trial_seed) -> tuple[Dataset, Dataset]:
    """Draw (data1, data2). Covariates do not depend on the regime."""
    ss = trial_seed if isinstance(trial_seed, np.random.SeedSequence) else np.random.SeedSequence(trial_seed)
    x1_ss, x2_ss, y1_ss, y2_ss = ss.spawn(4)
    x1 = draw_covariates(spec.model, 1, spec.n1, np.random.default_rng(x1_ss))
    x2 = draw_covariates(spec.model, 2, spec.n2, np.random.default_rng(x2_ss))
    y1 = draw_responses(spec.model, x1, 0.0, np.random.default_rng(y1_ss))
    y2 = draw_responses(spec.model, x2, spec.shift, np.random.default_rng(y2_ss))
    return Dataset(y1, x1), Dataset(y2, x2)


def trim_support(data2: Dataset, data1: Dataset) -> tuple[Dataset, int]:
    """Drop rows of ``data2`` whose covariates leave the bounding box of ``data1``'s."""
    if data1.d != data2.d:
        raise PreconditionError("covariate dimensions differ")
    lo, hi = data1.x.min(axis=0), data1.x.max(axis=0)
    keep = ((data2.x >= lo) & (data2.x <= hi)).all(axis=1)
    if not keep.any():
        raise DataError("every row of data2 lies outside data1's covariate range; use a larger n1")
    return data2.take(np.flatnonzero(keep)), int((~keep).sum())


def run_named_test(
    test: str,
    data1: Dataset,
    data2: Dataset,
    alpha: float,
    seed,
    mdn_spec=None,
    classifier_spec=None,
    n_perm: int = 300,
    bin_side: float | None = None,
    oracle=None,
    generator=None,
):
    """Dispatch by test name; returns the outcome object of the chosen test."""
    test = canonical_test(test)
    if test == "gp-cdet":
        return permutation.gp_cdet(data1, data2, alpha, bin_side, mdn_spec, n_perm, seed, generator=generator)
    if test == "adaptive-gp-cdet":
        return permutation.adaptive_gp_cdet(data1, data2, alpha, mdn_spec, n_perm, seed, generator=generator)
    if test.startswith("oracle"):
        if oracle is None:
            raise PreconditionError(f"{test} needs the true conditional sampler")
        return classification.oracle_gca_cdet(oracle, data2, alpha, classifier_spec, seed)
    return classification.gca_cdet(data1, data2, alpha, mdn_spec, classifier_spec, seed, generator=generator)


def outcome_statistic(outcome) -> tuple[float, float | None]:
    if isinstance(outcome, classification.AccTestOutcome):
        return outcome.statistic, None
    return outcome.u_stat, outcome.p_value


@dataclass
class TrialRecord:
    trial: int
    seed: str
    reject: bool | None
    statistic: float | None
    p_value: float | None
    n1: int
    n2: int
    dropped: int
    seconds: float
    error: str = ""


@dataclass
class TrialTable:
    label: str
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def completed(self) -> list:
        return [r for r in self.records if not r.error]

    @property
    def trials(self) -> int:
        return len(self.completed)

    @property
    def failures(self) -> int:
        return len(self.records) - self.trials

    @property
    def rejections(self) -> int:
        return sum(bool(r.reject) for r in self.completed)

    @property
    def frequency(self) -> float:
        return self.rejections / self.trials if self.trials else float("nan")

    def to_text(self) -> str:
        head = f"{'configuration':<48} {'trials':>6} {'failed':>6} {'rejections':>10} {'rate':>7} {'seconds':>9}"
        rate = f"{self.frequency:.3f}" if self.trials else "n/a"
        row = f"{self.label:<48} {self.trials:>6} {self.failures:>6} {self.rejections:>10} {rate:>7} {self.wall_clock:>9.1f}"
        return head + "\n" + row + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["configuration", "trials", "failed", "rejections", "rate", "seconds"])
        w.writerow([self.label, self.trials, self.failures, self.rejections, self.frequency, round(self.wall_clock, 3)])
        return buf.getvalue()

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        names = list(TrialRecord.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow(asdict(r))
        return buf.getvalue()


def trial_seed(base_seed: int, trial: int) -> np.random.SeedSequence:
    """Counter-derived stream for one trial; independent of execution order."""
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(trial),))


def _shared_generator(spec: SimulationSpec, data1: Dataset, data2: Dataset, test_ss, cache: dict):
    # Every test draws its training stream as the first child of its seed, so a
    # generator trained here is the one the test itself would have trained.
    if "generator" not in cache:
        train_ss = np.random.SeedSequence(test_ss.entropy, spawn_key=test_ss.spawn_key + (0,))
        cache["generator"] = permutation.fit_or_reuse(data1, data2, spec.mdn_spec(), train_ss)
    return cache["generator"]


def _run_one(spec: SimulationSpec, trial: int, cache: dict | None = None) -> TrialRecord:
    ss = trial_seed(spec.base_seed, trial)
    data_ss, test_ss = ss.spawn(2)
    t0 = time.perf_counter()
    seed_txt = f"{spec.base_seed}:{trial}"
    try:
        data1, data2 = generate_model(spec, data_ss)
        dropped = 0
        if spec.trim:
            data2, dropped = trim_support(data2, data1)
        generator = None
        if cache is not None and not spec.test.startswith("oracle"):
            generator = _shared_generator(spec, data1, data2, test_ss, cache)
        out = run_named_test(
            spec.test,
            data1,
            data2,
            spec.alpha,
            test_ss,
            spec.mdn_spec(),
            spec.classifier_spec(),
            spec.n_perm,
            oracle=true_generator(spec.model),
            generator=generator,
        )
        stat, pval = outcome_statistic(out)
        return TrialRecord(trial, seed_txt, bool(out.reject), float(stat), pval, data1.n, data2.n, dropped, time.perf_counter() - t0)
    except GencdetError as exc:
        return TrialRecord(trial, seed_txt, None, None, None, spec.n1, spec.n2, 0, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")


def _label(spec: SimulationSpec) -> str:
    return f"M{spec.model} {spec.regime} {spec.test} n1={spec.n1} n2={spec.n2}"


def _run_chunk(args):
    spec, trials = args
    return [_run_one(spec, t) for t in trials]


def run_trials(spec: SimulationSpec) -> TrialTable:
    """Run ``spec.trials`` independent trials and tabulate the rejection rate."""
    table = TrialTable(_label(spec))
    t0 = time.perf_counter()
    trials = list(range(spec.trials))
    if spec.workers > 1 and len(trials) > 1:
        chunks = [trials[i :: spec.workers] for i in range(spec.workers)]
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for recs in pool.map(_run_chunk, [(spec, c) for c in chunks if c]):
                table.records.extend(recs)
        table.records.sort(key=lambda r: r.trial)
    else:
        table.records = [_run_one(spec, t) for t in trials]
    table.wall_clock = time.perf_counter() - t0
    return table


def _run_pair_chunk(args):
    specs, trials = args
    out = []
    for t in trials:
        cache = {}
        out.append([_run_one(s, t, cache) for s in specs])
    return out


def run_regimes(spec: SimulationSpec) -> dict[str, TrialTable]:
    """Run the null and the alternative regime of ``spec`` trial by trial.

    Sample 1 has the same law under both regimes and trial ``t`` uses the same
    seed in each, so one generator per trial serves both tests. The tables are
    identical to two separate :func:`run_trials` calls at about half the cost.
    """
    specs = [SimulationSpec(**{**spec.__dict__, "regime": r}) for r in ("null", "alternative")]
    tables = {s.regime: TrialTable(_label(s)) for s in specs}
    t0 = time.perf_counter()
    trials = list(range(spec.trials))
    if spec.workers > 1 and len(trials) > 1:
        chunks = [trials[i :: spec.workers] for i in range(spec.workers)]
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            pairs = [p for part in pool.map(_run_pair_chunk, [(specs, c) for c in chunks if c]) for p in part]
    else:
        pairs = _run_pair_chunk((specs, trials))
    for pair in sorted(pairs, key=lambda p: p[0].trial):
        for s, rec in zip(specs, pair):
            tables[s.regime].records.append(rec)
    elapsed = time.perf_counter() - t0
    for table in tables.values():
        table.wall_clock = elapsed
    return tables


def real_data_split_experiment(
    dataset: Dataset,
    n1: int,
    n2: int,
    shift: float = 0.0,
    trials: int = 100,
    test: str = "gca-cdet-nn",
    alpha: float = 0.05,
    seed: int = 0,
    mdn_spec=None,
    classifier_spec=None,
    n_perm: int = 300,
    trim: bool = True,
) -> TrialTable:
    """Disjoint random subsamples of one dataset; ``shift`` is added to the second sample's responses."""
    test = canonical_test(test)
    if test.startswith("oracle"):
        raise PreconditionError("oracle tests need a known conditional law")
    if n1 + n2 > dataset.n:
        raise PreconditionError(f"n1 + n2 = {n1 + n2} exceeds the {dataset.n} available rows")
    table = TrialTable(f"split shift={shift} {test} n1={n1} n2={n2}")
    t0 = time.perf_counter()
    for t in range(trials):
        ss = trial_seed(seed, t)
        data_ss, test_ss = ss.spawn(2)
        t1 = time.perf_counter()
        idx = np.random.default_rng(data_ss).permutation(dataset.n)
        d1 = dataset.take(idx[:n1])
        d2 = dataset.take(idx[n1 : n1 + n2])
        d2 = Dataset(d2.y + shift, d2.x)
        try:
            dropped = 0
            if trim:
                d2, dropped = trim_support(d2, d1)
            out = run_named_test(test, d1, d2, alpha, test_ss, mdn_spec, classifier_spec, n_perm)
            stat, pval = outcome_statistic(out)
            rec = TrialRecord(t, f"{seed}:{t}", bool(out.reject), float(stat), pval, d1.n, d2.n, dropped, time.perf_counter() - t1)
        except GencdetError as exc:
            rec = TrialRecord(t, f"{seed}:{t}", None, None, None, n1, n2, 0, time.perf_counter() - t1, f"{type(exc).__name__}: {exc}")
        table.records.append(rec)
    table.wall_clock = time.perf_counter() - t0
    return table
