"""Answer accuracy, expression accuracy and correct-in-beam diversity counts."""
from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cvae, expr, model
from .autodiff import ParamStore

MODES = ("prior-mean", "sampled")


class EmptyCorpus(ValueError):
    pass


class Solver:
    """Frozen network that maps problems to beams.

    A parameter store holding ``cvae.*`` entries is treated as a student:
    its decoder root is shifted by the prior mean, or by a prior sample in
    ``sampled`` mode.  Sample draws depend only on (seed, sample index,
    problem id), so results do not depend on batching or thread count.
    """

    def __init__(self, params: ParamStore, cfg: model.ModelConfig, max_len: int = 15,
                 threads: int = 1, chunk: int = 64):
        self.params = params
        self.cfg = cfg
        self.max_len = max_len
        self.threads = max(1, threads)
        self.chunk = chunk
        self.is_student = "cvae.proj.W" in params

    def _latent(self, enc, problems, mode, seed, sample):
        if not self.is_student:
            return None
        p = cvae.prior_batch(self.params, enc)
        if mode == "prior-mean":
            return cvae.project(p.mu, self.params).value
        if mode != "sampled":
            raise ValueError(f"unknown mode {mode!r}")
        eps = np.stack([np.random.default_rng([seed, 5, sample, zlib.crc32(q.id.encode())])
                        .standard_normal(p.mu.shape[1]) for q in problems])
        return cvae.sample(p, None, self.params, eps).h_z.value

    def _chunk(self, problems, K, mode, seed, sample):
        enc = model.encode_batch(self.params, self.cfg, problems)
        ctx = model.decoder_context(self.params, self.cfg, enc)
        lat = self._latent(enc, problems, mode, seed, sample)
        out = []
        for b in range(len(problems)):
            try:
                out.append(model.beam_search(enc, None if lat is None else lat[b:b + 1], K, self.max_len,
                                             self.params, self.cfg, b=b, ctx=ctx))
            except model.EmptyBeam:
                out.append(model.BeamResult())
        return out

    def predict(self, problems, K: int, mode: str = "prior-mean", seed: int = 0, sample: int = 0) -> list:
        problems = list(problems)
        parts = [problems[i:i + self.chunk] for i in range(0, len(problems), self.chunk)]
        if self.threads == 1 or len(parts) == 1:
            done = [self._chunk(p, K, mode, seed, sample) for p in parts]
        else:
            with ThreadPoolExecutor(self.threads) as pool:
                done = list(pool.map(lambda p: self._chunk(p, K, mode, seed, sample), parts))
        return [b for part in done for b in part]


def _problems(corpus):
    problems = list(getattr(corpus, "problems", corpus))
    if not problems:
        raise EmptyCorpus("cannot evaluate on an empty corpus")
    return problems


def _constants(corpus):
    return getattr(corpus, "constants", None)


def _top_correct(problem, beam, constants):
    if not beam.entries:
        return False
    return expr.equation_is_correct(beam.entries[0].equation, problem.quantities,
                                    problem.gold_answer, constants)


def answer_accuracy(solver, corpus, mode: str = "prior-mean", samples: int = 1, seed: int = 0,
                    K: int = 1, beams=None) -> float:
    """Share of problems whose rank-1 equation evaluates to the gold answer.

    In ``sampled`` mode the share is averaged over ``samples`` latent draws.
    """
    problems = _problems(corpus)
    constants = _constants(corpus)
    if beams is not None:
        runs = [beams]
    elif mode == "sampled":
        runs = [solver.predict(problems, K, mode, seed, s) for s in range(samples)]
    else:
        runs = [solver.predict(problems, K, mode)]
    hits = [sum(_top_correct(p, b, constants) for p, b in zip(problems, run)) for run in runs]
    return float(np.mean(hits)) / len(problems)


def expression_accuracy(solver, corpus, K: int = 1, beams=None) -> float:
    problems = _problems(corpus)
    beams = beams if beams is not None else solver.predict(problems, K)
    hits = sum(1 for p, b in zip(problems, beams) if b.entries and b.entries[0].equation == p.gold_equation)
    return hits / len(problems)


def correct_in_beam(problem, beam, constants=None) -> int:
    """Distinct, prefix-valid, answer-matching equations in one beam."""
    seen = set()
    for e in beam.entries:
        if e.equation in seen or not expr.validate_prefix(e.equation):
            continue
        if expr.equation_is_correct(e.equation, problem.quantities, problem.gold_answer, constants):
            seen.add(e.equation)
    return len(seen)


@dataclass
class DiversityHistogram:
    buckets: dict      # gold operator count -> {"problems": n, "correct": total}

    @property
    def total(self) -> int:
        return sum(v["correct"] for v in self.buckets.values())

    @property
    def problems(self) -> int:
        return sum(v["problems"] for v in self.buckets.values())

    def mean(self) -> float:
        return self.total / self.problems if self.problems else 0.0

    def to_json(self) -> dict:
        return {str(k): dict(v) for k, v in sorted(self.buckets.items())}


def pooled_beams(solver, problems, K: int, samples: int, seed: int = 0) -> list:
    """Top-K distinct equations pooled over beams decoded from ``samples`` prior draws.

    Each equation keeps its best score; ties break on tokens.  A network
    without a latent gives identical beams for every draw, so pooling
    returns its ordinary beam.
    """
    runs = [solver.predict(problems, K, "sampled", seed, s) for s in range(samples)]
    out = []
    for i in range(len(problems)):
        best: dict = {}
        for run in runs:
            for e in run[i].entries:
                if e.equation not in best or e.log_score > best[e.equation]:
                    best[e.equation] = e.log_score
        ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:K]
        out.append(model.BeamResult([model.BeamEntry(eq, sc, r + 1) for r, (eq, sc) in enumerate(ranked)]))
    return out


def diversity_count(solver, corpus, K: int, beams=None, mode: str = "prior-mean", samples: int = 5,
                    seed: int = 0) -> DiversityHistogram:
    """Correct-in-beam counts bucketed by gold operator count.

    ``sampled`` mode pools beams over several prior draws (see pooled_beams).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    problems = _problems(corpus)
    constants = _constants(corpus)
    if beams is None:
        beams = (pooled_beams(solver, problems, K, samples, seed) if mode == "sampled"
                 else solver.predict(problems, K))
    buckets: dict = {}
    for p, b in zip(problems, beams):
        key = expr.operator_count(p.gold_equation)
        slot = buckets.setdefault(key, {"problems": 0, "correct": 0})
        slot["problems"] += 1
        slot["correct"] += correct_in_beam(p, b, constants)
    return DiversityHistogram(buckets)


# ---------------------------------------------------------------- reports

def evaluate(solver, corpus, K: int = 5, mode: str = "prior-mean", samples: int = 1, seed: int = 0) -> dict:
    """All three metrics from one pass of K-beams (plus sampled passes if asked)."""
    problems = _problems(corpus)
    beams = solver.predict(problems, K)
    report = {
        "split": getattr(corpus, "split", None),
        "problems": len(problems),
        "K": K,
        "answer_accuracy": answer_accuracy(solver, corpus, beams=beams),
        "expression_accuracy": expression_accuracy(solver, corpus, beams=beams),
    }
    div = diversity_count(solver, corpus, K, beams=beams)
    report["diversity_total"] = div.total
    report["diversity_mean"] = div.mean()
    report["diversity_by_operators"] = div.to_json()
    if mode == "sampled":
        report["sampled_answer_accuracy"] = answer_accuracy(solver, corpus, "sampled", samples, seed)
        report["sampled_diversity_total"] = diversity_count(solver, corpus, K, mode="sampled",
                                                            samples=samples, seed=seed).total
        report["samples"] = samples
        report["seed"] = seed
    return report


def write_report(path, reports) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def format_table(reports) -> str:
    cols = ["name", "split", "problems", "answer_accuracy", "expression_accuracy", "diversity_total",
            "diversity_mean"]
    if any("sampled_answer_accuracy" in r for r in reports):
        cols.append("sampled_answer_accuracy")
    rows = [[_cell(r.get(c, "")) for c in cols] for r in reports]
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
    line = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(out)


def _cell(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)
