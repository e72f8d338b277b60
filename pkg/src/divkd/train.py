"""Teacher pre-training and distillation training of the latent-variable student."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cvae, distill, metrics, model
from .autodiff import ParamStore

log = logging.getLogger(__name__)

LATENT_MODES = ("learned", "zero")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 30
    lr: float = 1e-3
    lr_halving_period: int = 20
    hidden_dim: int = 64
    embed_dim: int = 32
    latent_dim: int = 32
    seed: int = 0
    distill: distill.DistillConfig = field(default_factory=distill.DistillConfig)
    kl_anneal_epochs: int = 10
    clip_norm: float = 5.0
    max_len: int = 15
    # "zero": CVAE starts at zero and its projection stays frozen, so the
    # student decodes exactly like the base network.
    latent_mode: str = "learned"
    eval_K: int = 1
    recompute_beams: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_halving_period", "hidden_dim", "embed_dim", "latent_dim",
                     "max_len", "eval_K"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.kl_anneal_epochs < 0:
            raise ValueError("kl_anneal_epochs must be >= 0")
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"latent_mode must be one of {LATENT_MODES}")

    def flat(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "distill"}
        d.update(dataclasses.asdict(self.distill))
        return d

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        """Build from flat key/value pairs; string values are coerced to the field type."""
        own = {f.name: f for f in dataclasses.fields(cls) if f.name != "distill"}
        dist = {f.name: f for f in dataclasses.fields(distill.DistillConfig)}
        a, b = {}, {}
        for k, v in values.items():
            k = k.replace("-", "_")
            if k in own:
                a[k] = _coerce(v, type(getattr(cls(), k)))
            elif k in dist:
                b[k] = _coerce(v, type(getattr(distill.DistillConfig(), k)))
            else:
                raise KeyError(f"unknown config key {k!r}")
        return cls(distill=distill.DistillConfig(**b), **a)

    def with_updates(self, **values) -> "TrainConfig":
        merged = self.flat()
        merged.update(values)
        return TrainConfig.from_flat(merged)


def _coerce(v, typ):
    if not isinstance(v, str):
        return typ(v)
    if typ is bool:
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    return typ(v)


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_config_file(path, cfg: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in cfg.flat().items():
            f.write(f"{k} = {v}\n")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``epoch``: halved every ``lr_halving_period`` epochs."""
    return cfg.lr * 0.5 ** ((epoch - 1) // cfg.lr_halving_period)


def kl_weight_at(epoch: int, cfg: TrainConfig) -> float:
    if cfg.kl_anneal_epochs == 0:
        return 1.0
    return min(1.0, (epoch - 1) / cfg.kl_anneal_epochs)


def model_config(train_corpus, cfg: TrainConfig, max_quantities=None) -> model.ModelConfig:
    return model.config_for_corpus(train_corpus, cfg.hidden_dim, cfg.embed_dim, cfg.latent_dim,
                                   max_quantities=max_quantities)


class RunLog:
    """Append-only per-epoch records, mirrored to a JSONL file when a path is given."""

    def __init__(self, path=None, records=None):
        self.path = path
        self.records = list(records or [])

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> "RunLog":
        with open(path, encoding="utf-8") as f:
            return RunLog(None, [json.loads(x) for x in f if x.strip()])

    def without_timing(self) -> list:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]


# ---------------------------------------------------------------- shared loop

@dataclass
class _State:
    epoch: int = 0
    best_acc: float = -1.0
    best_epoch: int = 0
    best: ParamStore | None = None


def _rngs(seed):
    return np.random.default_rng([seed, 3]), np.random.default_rng([seed, 4])


def _save(run_dir, name, store, mcfg, cfg, kind, extra):
    if run_dir is None:
        return
    meta = {"kind": kind, "model": mcfg.to_json(), "train": cfg.flat()}
    meta.update(extra)
    ad.save_checkpoint(os.path.join(run_dir, name), store, meta)


def _fit(kind, train, dev, store, trainable, step_fn, cfg, mcfg, run_dir, runlog, resume):
    shuffle_rng, latent_rng = _rngs(cfg.seed)
    state = _State()
    if resume is not None:
        meta = resume.meta
        state.epoch = meta["epoch"]
        state.best_acc = meta["best_acc"]
        state.best_epoch = meta["best_epoch"]
        shuffle_rng.bit_generator.state = meta["shuffle_rng"]
        latent_rng.bit_generator.state = meta["latent_rng"]
        best_path = os.path.join(run_dir, "best.ckpt") if run_dir else None
        state.best = (ad.load_checkpoint(best_path, store.shapes())
                      if best_path and os.path.exists(best_path) else store.copy())
    problems = list(train.problems)
    n = len(problems)
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training set size {n}")
    solver_dev = metrics.Solver(store, mcfg, cfg.max_len)
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        klw = kl_weight_at(epoch, cfg)
        order = shuffle_rng.permutation(n)
        sums: dict = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            batch = [problems[i] for i in order[start:start + cfg.batch_size]]
            terms = step_fn(batch, klw, latent_rng)
            if not all(math.isfinite(v) for v in terms.values()):
                raise DivergenceError(f"{kind}: non-finite loss at epoch {epoch}: {terms}")
            ad.clip_grad_norm(store, cfg.clip_norm, trainable)
            ad.adam_step(store, lr, names=trainable)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        dev_acc = metrics.answer_accuracy(solver_dev, dev, K=cfg.eval_K) if len(dev.problems) else 0.0
        record = {"epoch": epoch, "lr": lr, "kl_weight": klw, "dev_answer_accuracy": dev_acc}
        record.update({k: v / batches for k, v in sums.items()})
        record["wall_time"] = time.perf_counter() - t0
        runlog.append(record)
        log.info("%s epoch %d loss %.4f dev %.4f", kind, epoch, record["total"], dev_acc)
        if dev_acc > state.best_acc:
            state.best_acc, state.best_epoch = dev_acc, epoch
            state.best = store.copy()
            _save(run_dir, "best.ckpt", state.best, mcfg, cfg, kind,
                  {"epoch": epoch, "dev_answer_accuracy": dev_acc})
        _save(run_dir, "last.ckpt", store, mcfg, cfg, kind,
              {"epoch": epoch, "best_acc": state.best_acc, "best_epoch": state.best_epoch,
               "shuffle_rng": shuffle_rng.bit_generator.state,
               "latent_rng": latent_rng.bit_generator.state})
    best = state.best if state.best is not None else store.copy()
    best.meta.update({"best_epoch": state.best_epoch, "dev_answer_accuracy": state.best_acc})
    return best


def _prepare_run(run_dir, resume_path, fresh_store):
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    resume = None
    if resume_path:
        resume = ad.load_checkpoint(resume_path, fresh_store.shapes())
        fresh_store.params = resume.params
        fresh_store.adam_m, fresh_store.adam_v = resume.adam_m, resume.adam_v
        fresh_store.meta["step"] = resume.meta.get("step", 0)
    return resume


def _runlog(run_dir, runlog, resume):
    if runlog is not None:
        return runlog
    if not run_dir:
        return RunLog()
    path = os.path.join(run_dir, "runlog.jsonl")
    if resume:
        return RunLog(path, RunLog.read(path).records if os.path.exists(path) else [])
    open(path, "w").close()
    return RunLog(path)


# ---------------------------------------------------------------- teacher

def init_teacher(mcfg: model.ModelConfig, cfg: TrainConfig) -> ParamStore:
    store = model.init_base_params(mcfg, cfg.seed)
    store.meta["config_hash"] = mcfg.digest()
    return store


def pretrain_teacher(train, dev, cfg: TrainConfig, mcfg: model.ModelConfig | None = None, run_dir=None,
                     runlog: RunLog | None = None, resume=None) -> ParamStore:
    """Base network trained on gold equations by teacher-forced NLL; returns the best-dev snapshot."""
    mcfg = mcfg or model_config(train, cfg)
    store = init_teacher(mcfg, cfg)
    res = _prepare_run(run_dir, resume, store)
    runlog = _runlog(run_dir, runlog, resume)

    def step(batch, klw, rng):
        with ad.Tape():
            enc = model.encode_batch(store, mcfg, batch)
            ctx = model.decoder_context(store, mcfg, enc)
            tf = model.teacher_forced(store, mcfg, ctx, [p.gold_equation for p in batch])
            loss = ad.mean(tf.nll)
            ad.backward(loss, store)
        v = loss.item()
        return {"nll": v, "total": v}

    return _fit("teacher", train, dev, store, store.names(), step, cfg, mcfg, run_dir, runlog, res)


# ---------------------------------------------------------------- student

def init_student(mcfg: model.ModelConfig, cfg: TrainConfig) -> ParamStore:
    store = model.init_base_params(mcfg, cfg.seed)
    cvae.init_cvae_params(mcfg, cfg.seed, store, zero=cfg.latent_mode == "zero")
    store.meta["config_hash"] = mcfg.digest()
    return store


def student_trainable(store: ParamStore, cfg: TrainConfig) -> list:
    if cfg.latent_mode == "zero":
        return [n for n in store.names() if not n.startswith("cvae.proj.")]
    return store.names()


class BeamCache:
    """Teacher beams per problem id.

    The teacher is frozen during distillation, so a beam recomputed in a
    later epoch is bitwise equal to the first one; the cache only saves
    time.  ``recompute=True`` disables it.
    """

    def __init__(self, teacher, mcfg, K, max_len, recompute=False):
        self.teacher, self.mcfg, self.K, self.max_len = teacher, mcfg, K, max_len
        self.recompute = recompute
        self.store: dict = {}

    def get(self, problems) -> list:
        missing = [p for p in problems if self.recompute or p.id not in self.store]
        if missing:
            for p, beam in zip(missing, distill.teacher_beams(self.teacher, self.mcfg, missing, self.K,
                                                              self.max_len)):
                self.store[p.id] = beam
        return [self.store[p.id] for p in problems]


def train_student(train, dev, teacher: ParamStore, cfg: TrainConfig, mcfg: model.ModelConfig | None = None,
                  run_dir=None, runlog: RunLog | None = None, resume=None) -> ParamStore:
    """Latent-variable student trained on gold labels plus verified teacher beams."""
    mcfg = mcfg or model_config(train, cfg)
    missing = set(model.init_base_params(mcfg, 0).shapes()) - set(teacher.names())
    if missing:
        raise ValueError(f"teacher checkpoint lacks parameters: {sorted(missing)[:3]}")
    dcfg = cfg.distill
    store = init_student(mcfg, cfg)
    res = _prepare_run(run_dir, resume, store)
    runlog = _runlog(run_dir, runlog, resume)
    trainable = student_trainable(store, cfg)
    beams = BeamCache(teacher, mcfg, dcfg.K, cfg.max_len, cfg.recompute_beams)
    constants = train.constants

    def step(batch, klw, rng):
        golds = [p.gold_equation for p in batch]
        verified, t_tf = None, None
        if dcfg.beta or dcfg.gamma:
            verified = [distill.verify_beam(b, p, dcfg, constants) for p, b in zip(batch, beams.get(batch))]
        if dcfg.gamma:
            t_enc = model.encode_batch(teacher, mcfg, batch)
            t_tf = model.teacher_forced(teacher, mcfg, model.decoder_context(teacher, mcfg, t_enc), golds)
        out = {}
        with ad.Tape():
            enc = model.encode_batch(store, mcfg, batch)
            ctx = model.decoder_context(store, mcfg, enc)
            terms = cvae.cvae_batch_loss(store, mcfg, enc, ctx, golds, rng, klw)
            hard = soft = None
            if dcfg.beta:
                hl = distill.build_hard_labels(verified)
                row_of = {p.id: i for i, p in enumerate(batch)}
                hard = distill.hard_label_loss(store, mcfg, enc, [row_of[pid] for pid, _ in hl.pairs],
                                             [eq for _, eq in hl.pairs], rng)
                out["kd_pairs"] = float(len(hl))
            if dcfg.gamma:
                soft = distill.soft_label_batch(terms.decode, t_tf, np.array([v.weight for v in verified]), dcfg)
            loss = distill.total_loss(terms.loss, hard, soft, dcfg)
            ad.backward(loss, store)
        out.update({"nll": terms.nll.item(), "kl": terms.kl.item(), "cvae": terms.loss.item(),
                    "hard": hard.item() if hard is not None else 0.0,
                    "soft": soft.item() if soft is not None else 0.0, "total": loss.item()})
        if verified is not None:
            out["beam_weight"] = float(np.mean([v.weight for v in verified]))
        return out

    return _fit("student", train, dev, store, trainable, step, cfg, mcfg, run_dir, runlog, res)
