"""Seq2tree network: BiGRU encoder, goal-driven tree decoder, K-best search.

Batches are laid out with rows as the batch axis.  Encoder states of a
batch of B problems padded to n tokens live in one (n*B, H) matrix in
time-major order (row ``t*B + b``).  Decoder calls take ``rows``, the
problem index of each decoder row, so the same code serves teacher forcing
(one row per problem) and search (many hypotheses of one problem).

Child goals come from two feed-forward decomposition layers over (goal,
context, operator embedding).  There is no subtree-embedding merge, so a
right child does not see the finished left subtree.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import expr
from .autodiff import ParamStore, Tensor

NEG_INF = -1e9


class VocabError(KeyError):
    pass


class EmptyBeam(RuntimeError):
    pass


NUM_TOKEN = "[NUM]"


@dataclass(frozen=True)
class ModelConfig:
    vocab: tuple                      # input word tokens, id = position
    hidden_dim: int = 64
    embed_dim: int = 32
    latent_dim: int = 32
    operators: tuple = expr.OPERATORS
    constants: tuple = ("1", "3.14")
    max_quantities: int = 4

    def __post_init__(self):
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (split across the two GRU directions)")

    @property
    def n_fixed(self) -> int:
        return len(self.operators) + len(self.constants)

    def output_tokens(self, n_quantities: int) -> tuple:
        return (tuple(self.operators) + tuple(self.constants)
                + tuple(expr.quantity_token(i) for i in range(n_quantities)))

    def token_id(self, tok: str) -> int:
        if tok in self.operators:
            return self.operators.index(tok)
        if tok in self.constants:
            return len(self.operators) + self.constants.index(tok)
        i = expr.quantity_index(tok)
        if i is None or i >= self.max_quantities:
            raise VocabError(f"output token {tok!r} not in decoder vocabulary")
        return self.n_fixed + i

    def id_token(self, i: int) -> str:
        if i < len(self.operators):
            return self.operators[i]
        if i < self.n_fixed:
            return self.constants[i - len(self.operators)]
        return expr.quantity_token(i - self.n_fixed)

    def to_json(self) -> dict:
        return {"vocab": list(self.vocab), "hidden_dim": self.hidden_dim, "embed_dim": self.embed_dim,
                "latent_dim": self.latent_dim, "operators": list(self.operators),
                "constants": list(self.constants), "max_quantities": self.max_quantities}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(tuple(d["vocab"]), d["hidden_dim"], d["embed_dim"], d["latent_dim"],
                   tuple(d["operators"]), tuple(d["constants"]), d["max_quantities"])

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def config_for_corpus(corpus, hidden_dim=64, embed_dim=32, latent_dim=32,
                      operators=expr.OPERATORS, max_quantities=None) -> ModelConfig:
    vocab = tuple(t for t in corpus.vocab if not expr.is_quantity(t))
    return ModelConfig(vocab, hidden_dim, embed_dim, latent_dim, tuple(operators),
                       tuple(corpus.constants), max_quantities or max(corpus.max_quantities(), 1))


# ---------------------------------------------------------------- parameters

def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def _gru_params(store, prefix, rng, in_dim, d):
    store.add(prefix + ".W_ih", _uniform(rng, (in_dim, 3 * d), d))
    store.add(prefix + ".W_hh", _uniform(rng, (d, 3 * d), d))
    store.add(prefix + ".b_ih", _uniform(rng, (1, 3 * d), d))
    store.add(prefix + ".b_hh", _uniform(rng, (1, 3 * d), d))


def init_base_params(cfg: ModelConfig, seed: int, store: ParamStore | None = None) -> ParamStore:
    """Encoder and decoder parameters, drawn from a stream reserved for them."""
    rng = np.random.default_rng([seed, 1])
    store = store if store is not None else ParamStore({"seed": seed})
    H, E, d = cfg.hidden_dim, cfg.embed_dim, cfg.hidden_dim // 2
    O = len(cfg.operators)
    store.add("enc.embedding", rng.normal(0.0, 1.0, size=(len(cfg.vocab) + 1, E)))
    _gru_params(store, "enc.fwd", rng, E, d)
    _gru_params(store, "enc.bwd", rng, E, d)
    store.add("dec.attn.W_s", _uniform(rng, (H, H), H))
    store.add("dec.attn.W_g", _uniform(rng, (H, H), H))
    store.add("dec.attn.b", _uniform(rng, (1, H), H))
    store.add("dec.attn.v", _uniform(rng, (H, 1), H))
    store.add("dec.score.W", _uniform(rng, (2 * H, H), 2 * H))
    store.add("dec.score.b", _uniform(rng, (1, H), 2 * H))
    store.add("dec.out_emb", _uniform(rng, (cfg.n_fixed, H), H))
    store.add("dec.slot.W", _uniform(rng, (H, H), H))
    store.add("dec.op_emb", rng.normal(0.0, 1.0, size=(O, E)))
    store.add("dec.left.W", _uniform(rng, (2 * H + E, H), 2 * H + E))
    store.add("dec.left.b", _uniform(rng, (1, H), 2 * H + E))
    store.add("dec.right.W", _uniform(rng, (2 * H + E, H), 2 * H + E))
    store.add("dec.right.b", _uniform(rng, (1, H), 2 * H + E))
    return store


# ---------------------------------------------------------------- encoder

def gru_cell(x_proj: Tensor, h: Tensor, W_hh: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step given the precomputed input projection ``x W_ih + b_ih``."""
    d = h.shape[1]
    gh = ad.linear(h, W_hh, b_hh)
    rz = ad.sigmoid(ad.slice_cols(x_proj, 0, 2 * d) + ad.slice_cols(gh, 0, 2 * d))
    r = ad.slice_cols(rz, 0, d)
    z = ad.slice_cols(rz, d, 2 * d)
    n = ad.tanh(ad.slice_cols(x_proj, 2 * d, 3 * d) + r * ad.slice_cols(gh, 2 * d, 3 * d))
    return n + z * (h - n)


def bigru(params: ParamStore, prefix: str, X: Tensor, lengths: np.ndarray, n: int):
    """Bidirectional GRU over a time-major (n*B, E) input.

    Returns (per-step forward states, per-step backward states, final
    forward state, final backward state); padded steps leave states
    unchanged.
    """
    B = len(lengths)
    d = params[prefix + ".fwd.W_hh"].shape[0]
    masks = [None] * n
    for t in range(n):
        active = (t < lengths)
        if not active.all():
            masks[t] = active.astype(np.float64).reshape(-1, 1)
    outs = {}
    finals = {}
    for direction, steps in (("fwd", range(n)), ("bwd", range(n - 1, -1, -1))):
        p = f"{prefix}.{direction}"
        gx = ad.linear(X, params[p + ".W_ih"], params[p + ".b_ih"])
        W_hh, b_hh = params[p + ".W_hh"], params[p + ".b_hh"]
        h = Tensor(np.zeros((B, d)))
        seq = [None] * n
        for t in steps:
            h_new = gru_cell(ad.slice_rows(gx, t * B, (t + 1) * B), h, W_hh, b_hh)
            m = masks[t]
            h = h_new if m is None else h_new * m + h * (1.0 - m)
            seq[t] = h
        outs[direction] = seq
        finals[direction] = h
    return outs["fwd"], outs["bwd"], finals["fwd"], finals["bwd"]


@dataclass
class EncoderOutput:
    """Encoder result for B problems.

    ``states``: (n*B, H) time-major; ``root``: (B, H) concatenation of the
    final forward and backward states.
    """
    states: Tensor
    root: Tensor
    lengths: np.ndarray
    n: int
    slot_positions: list           # per problem, token index of each N_i
    n_quantities: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.lengths)

    def problem_states(self, b: int) -> np.ndarray:
        """(n_b, H) states of problem ``b`` (values only)."""
        B = self.batch_size
        return self.states.value[b::B][: self.lengths[b]]


def _input_ids(cfg: ModelConfig, tokens: Sequence[str], index: dict) -> list:
    ids = []
    num_id = len(cfg.vocab)
    for tok in tokens:
        if expr.is_quantity(tok):
            ids.append(num_id)
            continue
        i = index.get(tok)
        if i is None:
            raise VocabError(f"unknown input token {tok!r}")
        ids.append(i)
    return ids


_INDEX_CACHE: dict = {}


def _vocab_index(cfg: ModelConfig) -> dict:
    key = id(cfg.vocab)
    hit = _INDEX_CACHE.get(key)
    if hit is None or hit[0] is not cfg.vocab:
        hit = (cfg.vocab, {t: i for i, t in enumerate(cfg.vocab)})
        _INDEX_CACHE[key] = hit
    return hit[1]


def encode_batch(params: ParamStore, cfg: ModelConfig, problems: Sequence) -> EncoderOutput:
    index = _vocab_index(cfg)
    ids = [_input_ids(cfg, p.tokens, index) for p in problems]
    B = len(problems)
    lengths = np.array([len(x) for x in ids])
    if (lengths == 0).any():
        raise ValueError("cannot encode an empty problem")
    n = int(lengths.max())
    flat = np.zeros(n * B, dtype=np.int64)
    for b, row in enumerate(ids):
        for t, i in enumerate(row):
            flat[t * B + b] = i
    X = ad.gather_rows(params["enc.embedding"], flat)
    fwd, bwd, hf, hb = bigru(params, "enc", X, lengths, n)
    states = ad.concat_rows([ad.concat_cols([fwd[t], bwd[t]]) for t in range(n)])
    root = ad.concat_cols([hf, hb])
    slots = []
    nq = np.zeros(B, dtype=np.int64)
    for b, p in enumerate(problems):
        pos = [t for t, tok in enumerate(p.tokens) if expr.is_quantity(tok)]
        order = sorted(pos, key=lambda t: expr.quantity_index(p.tokens[t]))
        slots.append(order)
        nq[b] = len(p.quantities)
        if len(order) != len(p.quantities):
            raise VocabError(f"problem {p.id}: {len(order)} slot tokens for {len(p.quantities)} quantities")
        if nq[b] > cfg.max_quantities:
            raise VocabError(f"problem {p.id}: {nq[b]} quantities exceed max_quantities={cfg.max_quantities}")
    return EncoderOutput(states, root, lengths, n, slots, nq)


def encode(problem, params: ParamStore, cfg: ModelConfig) -> EncoderOutput:
    return encode_batch(params, cfg, [problem])


def select_problems(enc: EncoderOutput, index) -> EncoderOutput:
    """Encoder output for rows ``index`` of ``enc`` (repeats allowed), sharing its graph."""
    index = np.asarray(index, dtype=np.int64)
    B, n = enc.batch_size, enc.n
    src = (np.arange(n)[:, None] * B + index[None, :]).reshape(-1)
    return EncoderOutput(ad.gather_rows(enc.states, src), ad.gather_rows(enc.root, index),
                         enc.lengths[index], n, [enc.slot_positions[i] for i in index],
                         enc.n_quantities[index])


# ---------------------------------------------------------------- decoder

@dataclass
class DecoderContext:
    """Per-batch tensors reused at every decoding step."""
    enc: EncoderOutput
    keys: Tensor            # states @ W_s, (n*B, H)
    attn_mask: np.ndarray   # (B, n) additive
    slot_emb: Tensor        # (B*Q, H), row b*Q + k
    slot_mask: np.ndarray   # (B, Q) additive
    Q: int


def decoder_context(params: ParamStore, cfg: ModelConfig, enc: EncoderOutput) -> DecoderContext:
    B, n = enc.batch_size, enc.n
    Q = cfg.max_quantities
    keys = ad.linear(enc.states, params["dec.attn.W_s"])
    attn_mask = np.where(np.arange(n)[None, :] < enc.lengths[:, None], 0.0, NEG_INF)
    idx = np.zeros(B * Q, dtype=np.int64)
    slot_mask = np.full((B, Q), NEG_INF)
    for b in range(B):
        for k, t in enumerate(enc.slot_positions[b]):
            idx[b * Q + k] = t * B + b
            slot_mask[b, k] = 0.0
    slot_emb = ad.linear(ad.gather_rows(enc.states, idx), params["dec.slot.W"])
    return DecoderContext(enc, keys, attn_mask, slot_emb, slot_mask, Q)


def _is_identity(rows, B):
    return len(rows) == B and np.array_equal(rows, np.arange(B))


def attend(params: ParamStore, ctx: DecoderContext, goals: Tensor, rows: np.ndarray) -> Tensor:
    """Additive attention of each goal row over its problem's encoder states."""
    B, n = ctx.enc.batch_size, ctx.enc.n
    R = goals.shape[0]
    gW = ad.linear(goals, params["dec.attn.W_g"], params["dec.attn.b"])
    tiled = np.tile(np.arange(R), n)                          # row t*R + r -> r
    if _is_identity(rows, B):
        keys, states = ctx.keys, ctx.enc.states
    else:
        src = (np.arange(n)[:, None] * B + rows[None, :]).reshape(-1)
        keys = ad.gather_rows(ctx.keys, src)
        states = ad.gather_rows(ctx.enc.states, src)
    energy = ad.linear(ad.tanh(keys + ad.gather_rows(gW, tiled)), params["dec.attn.v"])
    scores = ad.transpose(ad.reshape(energy, (n, R))) + ctx.attn_mask[rows]
    weights = ad.softmax_row(scores)
    weighted = states * ad.reshape(ad.transpose(weights), (n * R, 1))
    return ad.reshape(ad.sum(ad.reshape(weighted, (n, R * goals.shape[1])), axis=0), (R, goals.shape[1]))


def score_tokens(params: ParamStore, ctx: DecoderContext, goals: Tensor, context: Tensor,
                 rows: np.ndarray) -> Tensor:
    """Logits (R, |ops|+|consts|+Q); absent quantity slots are masked."""
    B, Q = ctx.enc.batch_size, ctx.Q
    R = goals.shape[0]
    hidden = ad.tanh(ad.linear(ad.concat_cols([goals, context]), params["dec.score.W"], params["dec.score.b"]))
    fixed = ad.matmul(hidden, ad.transpose(params["dec.out_emb"]))
    rep = ad.gather_rows(hidden, np.repeat(np.arange(R), Q))
    if _is_identity(rows, B):
        slots = ctx.slot_emb
    else:
        slots = ad.gather_rows(ctx.slot_emb, (rows[:, None] * Q + np.arange(Q)[None, :]).reshape(-1))
    slot_logits = ad.reshape(ad.sum(rep * slots, axis=1), (R, Q)) + ctx.slot_mask[rows]
    return ad.concat_cols([fixed, slot_logits])


def decompose(params: ParamStore, goals: Tensor, context: Tensor, op_ids) -> tuple:
    """Left and right child goals for operator tokens ``op_ids``."""
    e = ad.gather_rows(params["dec.op_emb"], op_ids)
    x = ad.concat_cols([goals, context, e])
    left = ad.tanh(ad.linear(x, params["dec.left.W"], params["dec.left.b"]))
    right = ad.tanh(ad.linear(x, params["dec.right.W"], params["dec.right.b"]))
    return left, right


@dataclass
class DecodeStep:
    goal: np.ndarray
    context: np.ndarray
    logits: np.ndarray


@dataclass
class TeacherForced:
    """Batched teacher-forced decode.

    ``logits[t]`` is (B, V) over the padded vocabulary; ``active[t]`` flags
    rows whose target has a step ``t``; ``nll`` is the (B, 1) sequence NLL.
    """
    logits: list
    log_probs: list
    active: list
    nll: Tensor
    lengths: np.ndarray

    def steps(self, b: int, n_quantities: int, n_fixed: int) -> list:
        V = n_fixed + n_quantities
        return [DecodeStep(None, None, self.logits[t].value[b, :V].copy())
                for t in range(self.lengths[b])]


def _goal_sources(target_ids, op_count):
    """For each step: 0 for the root, 1+2p / 2+2p for the left/right child of step p."""
    src = []
    stack = [0]
    for t, tok in enumerate(target_ids):
        src.append(stack.pop())
        if tok < op_count:
            stack.append(2 + 2 * t)
            stack.append(1 + 2 * t)
    return src


def teacher_forced(params: ParamStore, cfg: ModelConfig, ctx: DecoderContext, targets: Sequence,
                   latent: Tensor | None = None, keep_steps: bool = False) -> TeacherForced:
    """Decode gold prefix sequences, one per problem row of ``ctx``.

    ``latent`` (B, H) is added to the root goal.
    """
    B = ctx.enc.batch_size
    O = len(cfg.operators)
    ids = [[cfg.token_id(t) for t in eq] for eq in targets]
    if len(ids) != B:
        raise ValueError(f"{len(ids)} targets for a batch of {B}")
    for b, eq in enumerate(targets):
        if not expr.validate_prefix(eq):
            raise ValueError(f"target {expr.format_prefix(eq)!r} is not a valid prefix equation")
        for tid in ids[b]:
            if tid >= cfg.n_fixed + ctx.enc.n_quantities[b]:
                raise VocabError(f"target references a quantity the problem lacks: {eq}")
    lengths = np.array([len(x) for x in ids])
    m = int(lengths.max())
    sources = [_goal_sources(x, O) for x in ids]
    rows = np.arange(B)
    root = ctx.enc.root if latent is None else ctx.enc.root + latent
    pool = [root]
    nll = None
    logits_out, logp_out, active_out = [], [], []
    for t in range(m):
        active = t < lengths
        src = np.array([sources[b][t] * B + b if active[b] else b for b in range(B)])
        pool_all = pool[0] if len(pool) == 1 else ad.concat_rows(pool)
        goals = ad.gather_rows(pool_all, src) if t > 0 else root
        context = attend(params, ctx, goals, rows)
        logits = score_tokens(params, ctx, goals, context, rows)
        logp = ad.log_softmax_row(logits)
        gold = np.array([ids[b][t] if active[b] else 0 for b in range(B)])
        picked = ad.pick(logp, gold)
        if not active.all():
            picked = picked * active.astype(np.float64).reshape(-1, 1)
        nll = -picked if nll is None else nll - picked
        op_ids = np.where(gold < O, gold, 0)
        left, right = decompose(params, goals, context, op_ids)
        pool.extend([left, right])
        logits_out.append(logits)
        logp_out.append(logp)
        active_out.append(active)
    return TeacherForced(logits_out, logp_out, active_out, nll, lengths)


def decode_teacher_forced(enc: EncoderOutput, target: Sequence[str], latent, params: ParamStore,
                          cfg: ModelConfig):
    """Single-problem teacher forcing: (list of DecodeStep, NLL 1x1 Tensor)."""
    ctx = decoder_context(params, cfg, enc)
    lat = None if latent is None else ad.as_tensor(latent)
    tf = teacher_forced(params, cfg, ctx, [tuple(target)], lat)
    return tf.steps(0, int(enc.n_quantities[0]), cfg.n_fixed), tf.nll


# ---------------------------------------------------------------- search

@dataclass
class BeamEntry:
    equation: tuple
    log_score: float
    rank: int


@dataclass
class BeamResult:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def equations(self) -> list:
        return [e.equation for e in self.entries]


class _Hyp:
    __slots__ = ("score", "ids", "stack")

    def __init__(self, score, ids, stack):
        self.score = score
        self.ids = ids
        self.stack = stack        # pending goal vectors, top at the end


def beam_search(enc: EncoderOutput, latent, K: int, max_len: int, params: ParamStore, cfg: ModelConfig,
                b: int = 0, ctx: DecoderContext | None = None, max_rounds: int = 400,
                frontier_cap: int = 4000) -> BeamResult:
    """Top-K complete prefix equations for problem ``b`` of ``enc``.

    Best-first search over partial sequences scored by summed log-prob
    (no length normalisation).  Up to K partial hypotheses are expanded per
    round as one decoder batch; a finished equation is emitted only when it
    heads the frontier, so while the breadth limits (``frontier_cap``,
    ``max_rounds``) are not hit the result is exactly the K best complete
    sequences of length <= max_len.  Ties break on token ids.
    """
    if K < 1 or max_len < 1:
        raise ValueError("K and max_len must be >= 1")
    ctx = ctx if ctx is not None else decoder_context(params, cfg, enc)
    O = len(cfg.operators)
    V = cfg.n_fixed + int(enc.n_quantities[b])
    root = enc.root.value[b:b + 1]
    if latent is not None:
        root = root + ad.as_tensor(latent).value.reshape(1, -1)
    heap = [(-0.0, (), False, 0, _Hyp(0.0, (), [root]))]
    counter = 1
    done: list[_Hyp] = []
    rounds = 0
    while heap and len(done) < K:
        if heap[0][2]:
            done.append(heapq.heappop(heap)[4])
            continue
        if rounds >= max_rounds:
            break
        rounds += 1
        batch = []
        while heap and len(batch) < K and not heap[0][2]:
            batch.append(heapq.heappop(heap)[4])
        goals = Tensor(np.concatenate([h.stack[-1] for h in batch], axis=0))
        rows = np.full(len(batch), b)
        context = attend(params, ctx, goals, rows)
        logp = ad.log_softmax_row(score_tokens(params, ctx, goals, context, rows)).value[:, :V]
        need_children = False
        cand = []
        for i, h in enumerate(batch):
            pending = len(h.stack)
            length = len(h.ids)
            for v in range(V):
                new_pending = pending + 1 if v < O else pending - 1
                if length + 1 + new_pending > max_len:
                    continue
                cand.append((i, v))
                need_children |= v < O
        if need_children:
            ops = np.arange(O)
            g_rep = Tensor(np.repeat(goals.value, O, axis=0))
            c_rep = Tensor(np.repeat(context.value, O, axis=0))
            left, right = decompose(params, g_rep, c_rep, np.tile(ops, len(batch)))
            left, right = left.value, right.value
        for i, v in cand:
            h = batch[i]
            score = h.score + float(logp[i, v])
            stack = h.stack[:-1]
            if v < O:
                j = i * O + v
                stack = stack + [right[j:j + 1], left[j:j + 1]]
            ids = h.ids + (v,)
            complete = not stack
            heapq.heappush(heap, (-score, ids, complete, counter, _Hyp(score, ids, stack)))
            counter += 1
        if len(heap) > frontier_cap:
            heap = heapq.nsmallest(frontier_cap, heap)
            heapq.heapify(heap)
    if not done:
        raise EmptyBeam(f"no equation completed within max_len={max_len}")
    entries = [BeamEntry(tuple(cfg.id_token(i) for i in h.ids), h.score, r + 1)
               for r, h in enumerate(done)]
    return BeamResult(entries)


def greedy_decode(enc: EncoderOutput, latent, max_len: int, params: ParamStore, cfg: ModelConfig,
                  b: int = 0) -> BeamEntry:
    """Argmax token at every step, restricted to sequences that can finish."""
    ctx = decoder_context(params, cfg, enc)
    O = len(cfg.operators)
    V = cfg.n_fixed + int(enc.n_quantities[b])
    root = enc.root.value[b:b + 1]
    if latent is not None:
        root = root + ad.as_tensor(latent).value.reshape(1, -1)
    stack, ids, score = [root], [], 0.0
    rows = np.array([b])
    while stack:
        g = Tensor(stack.pop())
        context = attend(params, ctx, g, rows)
        logp = ad.log_softmax_row(score_tokens(params, ctx, g, context, rows)).value[0, :V]
        pending = len(stack) + 1
        allowed = [v for v in range(V)
                   if len(ids) + 1 + (pending + 1 if v < O else pending - 1) <= max_len]
        if not allowed:
            raise EmptyBeam(f"greedy decoding cannot finish within max_len={max_len}")
        v = max(allowed, key=lambda u: (logp[u], -u))
        score += float(logp[v])
        ids.append(v)
        if v < O:
            left, right = decompose(params, g, context, [v])
            stack.extend([right.value, left.value])
    return BeamEntry(tuple(cfg.id_token(i) for i in ids), score, 1)


def sequence_log_prob(enc: EncoderOutput, eq: Sequence[str], latent, params: ParamStore,
                      cfg: ModelConfig) -> float:
    """log p(eq | problem) by teacher forcing; the independent scorer for search."""
    _, nll = decode_teacher_forced(enc, eq, latent, params, cfg)
    return -nll.item()


# ---------------------------------------------------------------- beam dumps

def beam_records(problem, beam: BeamResult, constants=None, tol: float = expr.ANSWER_TOL) -> list:
    """Rows of the beam-dump exchange format for one problem."""
    out = []
    for e in beam.entries:
        res = expr.evaluate(e.equation, problem.quantities, constants)
        ok = res.ok and expr.answers_match(res.value, problem.gold_answer, tol)
        out.append({"problem_id": problem.id, "rank": e.rank, "prefix": expr.format_prefix(e.equation),
                    "log_score": e.log_score, "value": res.value if res.ok else None, "correct": ok})
    return out


def write_beam_dump(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def read_beam_dump(path) -> dict:
    """Problem id -> BeamResult, ranks as stored."""
    beams: dict = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            beams.setdefault(r["problem_id"], []).append(
                BeamEntry(expr.parse_prefix(r["prefix"]), float(r["log_score"]), int(r["rank"])))
    return {pid: BeamResult(sorted(es, key=lambda e: e.rank)) for pid, es in beams.items()}
