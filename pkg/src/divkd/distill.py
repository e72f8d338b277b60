"""Answer-verified teacher beams turned into extra hard labels and weighted soft labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import cvae, expr, model
from .autodiff import ParamStore, Tensor

KL_ORDERS = ("student||teacher", "teacher||student")


@dataclass(frozen=True)
class DistillConfig:
    K: int = 5
    lam: float = 0.8          # rank attenuation
    beta: float = 0.3         # hard-label weight
    gamma: float = 0.1        # soft-label weight
    tau: float = 1.0
    kl_order: str = "student||teacher"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lam must lie in (0, 1]")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.kl_order not in KL_ORDERS:
            raise ValueError(f"kl_order must be one of {KL_ORDERS}")


def beam_weight(correct_ranks: Iterable[int], K: int, lam: float) -> float:
    """Rank-discounted share of correct beam entries; ranks are 1-based."""
    return sum(lam ** r for r in correct_ranks) / K


@dataclass
class VerifiedBeam:
    problem_id: str
    beam: model.BeamResult
    correct: tuple
    weight: float

    def correct_equations(self) -> list:
        return [e.equation for e, ok in zip(self.beam.entries, self.correct) if ok]


def verify_beam(beam: model.BeamResult, problem, cfg: DistillConfig, constants=None,
                tol: float = expr.ANSWER_TOL) -> VerifiedBeam:
    flags = tuple(expr.equation_is_correct(e.equation, problem.quantities, problem.gold_answer,
                                           constants, tol)
                  for e in beam.entries)
    w = beam_weight([e.rank for e, ok in zip(beam.entries, flags) if ok], cfg.K, cfg.lam)
    return VerifiedBeam(problem.id, beam, flags, w)


@dataclass
class HardLabelSet:
    pairs: list = field(default_factory=list)   # (problem id, equation)

    def __len__(self):
        return len(self.pairs)

    def for_problem(self, pid) -> list:
        return [eq for p, eq in self.pairs if p == pid]


def build_hard_labels(verified: Iterable[VerifiedBeam]) -> HardLabelSet:
    """All verified-correct equations, deduplicated within each problem."""
    pairs = []
    for vb in verified:
        seen = set()
        for eq in vb.correct_equations():
            if eq not in seen:
                seen.add(eq)
                pairs.append((vb.problem_id, eq))
    return HardLabelSet(pairs)


def teacher_beams(params: ParamStore, cfg: model.ModelConfig, problems: Sequence, K: int,
                  max_len: int) -> list:
    """Beam per problem with no latent; a beam that fails to finish is empty."""
    enc = model.encode_batch(params, cfg, problems)
    ctx = model.decoder_context(params, cfg, enc)
    out = []
    for b in range(len(problems)):
        try:
            out.append(model.beam_search(enc, None, K, max_len, params, cfg, b=b, ctx=ctx))
        except model.EmptyBeam:
            out.append(model.BeamResult())
    return out


# ---------------------------------------------------------------- losses

def hard_label_loss(params: ParamStore, cfg: model.ModelConfig, enc: model.EncoderOutput,
                  rows: Sequence[int], equations: Sequence, rng, eps=None) -> Tensor | None:
    """Mean teacher-forced NLL over distilled pairs; None for an empty set.

    ``rows[i]`` is the batch row of the problem owning ``equations[i]``.
    Each pair decodes with its own posterior sample computed on that
    equation.
    """
    if not len(equations):
        return None
    sub = model.select_problems(enc, rows)
    ctx = model.decoder_context(params, cfg, sub)
    q = cvae.posterior_batch(params, cfg, sub, equations)
    lat = cvae.sample(q, rng, params, eps)
    tf = model.teacher_forced(params, cfg, ctx, equations, lat.h_z)
    return ad.mean(tf.nll)


def step_kl(student_logits: Tensor, teacher_logits: np.ndarray, tau: float, order: str) -> Tensor:
    """Row-wise KL between softmax(student/tau) and softmax(teacher/tau), shape (R, 1)."""
    ls = ad.log_softmax_row(student_logits * (1.0 / tau))
    z = teacher_logits / tau
    z = z - z.max(axis=1, keepdims=True)
    lt = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if order == "student||teacher":
        return ad.sum(ad.exp(ls) * (ls - lt), axis=1)
    return ad.sum((ls * -1.0 + lt) * np.exp(lt), axis=1)


def soft_label_batch(student_tf: model.TeacherForced, teacher_tf: model.TeacherForced,
                   weights: np.ndarray, cfg: DistillConfig) -> Tensor:
    """Omega-weighted mean per-step KL, averaged over the batch's problems."""
    B = len(weights)
    lengths = student_tf.lengths
    total = None
    for t, logits in enumerate(student_tf.logits):
        w = np.where(student_tf.active[t], weights / np.maximum(lengths, 1), 0.0).reshape(-1, 1)
        if not w.any():
            continue
        kl = step_kl(logits, teacher_tf.logits[t].value, cfg.tau, cfg.kl_order)
        term = ad.sum(kl * w)
        total = term if total is None else total + term
    if total is None:
        return ad.Tensor(np.zeros((1, 1)))
    return total * (1.0 / B)


def soft_label_loss(student: ParamStore, teacher: ParamStore, problem, weight: float,
                  cfg: DistillConfig, mcfg: model.ModelConfig, latent=None) -> Tensor:
    """Single-problem soft loss, teacher-forced on the gold equation.

    ``latent`` is the student's root shift (defaults to none).
    """
    t_enc = model.encode(problem, teacher, mcfg)
    t_tf = model.teacher_forced(teacher, mcfg, model.decoder_context(teacher, mcfg, t_enc),
                                [problem.gold_equation])
    enc = model.encode(problem, student, mcfg)
    s_tf = model.teacher_forced(student, mcfg, model.decoder_context(student, mcfg, enc),
                                [problem.gold_equation], latent)
    return soft_label_batch(s_tf, t_tf, np.array([float(weight)]), cfg)


def total_loss(cvae_term, hard_term, soft_term, cfg: DistillConfig):
    """cvae + beta * hard + gamma * soft; a None term is skipped."""
    loss = cvae_term
    if hard_term is not None and cfg.beta:
        loss = loss + hard_term * cfg.beta
    if soft_term is not None and cfg.gamma:
        loss = loss + soft_term * cfg.gamma
    return loss


# ---------------------------------------------------------------- export

def distilled_records(problems: Sequence, beams: Sequence[model.BeamResult], constants=None) -> list:
    """Beam-dump rows restricted to verified-correct entries."""
    rows = []
    for p, beam in zip(problems, beams):
        rows.extend(r for r in model.beam_records(p, beam, constants) if r["correct"])
    return rows
