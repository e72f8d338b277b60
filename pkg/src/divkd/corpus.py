"""Word-problem corpora: data model, Math23K ingestion, toy generator, splits."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import expr

log = logging.getLogger(__name__)

DEFAULT_CONSTANTS = {"1": 1.0, "3.14": 3.14}


class FormatError(ValueError):
    pass


class FileError(OSError):
    pass


@dataclass(frozen=True)
class Problem:
    id: str
    tokens: tuple
    quantities: tuple
    gold_equation: tuple
    gold_answer: float

    def check(self, constants: Mapping[str, float] | None = None) -> bool:
        """Both Problem invariants: slot indices in range, gold evaluates to answer."""
        for tok in self.gold_equation:
            i = expr.quantity_index(tok)
            if i is not None and i >= len(self.quantities):
                return False
        return expr.equation_is_correct(self.gold_equation, self.quantities,
                                        self.gold_answer, constants)


@dataclass
class Corpus:
    problems: list
    vocab: dict
    constants: dict = field(default_factory=lambda: dict(DEFAULT_CONSTANTS))
    split: str = "train"

    def __len__(self):
        return len(self.problems)

    def __iter__(self):
        return iter(self.problems)

    def by_id(self) -> dict:
        return {p.id: p for p in self.problems}

    def max_quantities(self) -> int:
        return max((len(p.quantities) for p in self.problems), default=0)

    def subset(self, problems, split=None) -> "Corpus":
        return Corpus(list(problems), self.vocab, self.constants, split or self.split)


def build_vocab(problems: Iterable[Problem], extra: Sequence[str] = ()) -> dict:
    """Dense token ids in order of first appearance (extra tokens first)."""
    vocab: dict = {}
    for tok in extra:
        vocab.setdefault(tok, len(vocab))
    for p in problems:
        for tok in p.tokens:
            vocab.setdefault(tok, len(vocab))
    return vocab


# ---------------------------------------------------------------- number mapping

_TEXT_NUMBER_RE = re.compile(r"^(\d+(?:\.\d+)?|\.\d+)(%?)$|^\((\d+)/(\d+)\)$|^(\d+)/(\d+)$")


def parse_number(tok: str) -> float | None:
    """Value of a text number literal (``"8"``, ``"2.5"``, ``"3%"``, ``"(1/2)"``)."""
    m = _TEXT_NUMBER_RE.match(tok)
    if not m:
        return None
    if m.group(1) is not None:
        v = float(m.group(1))
        return v / 100.0 if m.group(2) else v
    num, den = (m.group(3), m.group(4)) if m.group(3) else (m.group(5), m.group(6))
    return float(num) / float(den) if float(den) != 0 else None


def map_numbers(words: Sequence[str]) -> tuple[tuple, tuple, tuple]:
    """Replace number literals with slot tokens ``N0, N1, ...`` in order.

    Returns (tokens, quantities, literals); ``literals[i]`` is the original
    text of slot ``i`` so the mapping can be inverted.
    """
    tokens, values, literals = [], [], []
    for w in words:
        v = parse_number(w)
        if v is None:
            tokens.append(w)
        else:
            tokens.append(expr.quantity_token(len(values)))
            values.append(v)
            literals.append(w)
    return tuple(tokens), tuple(values), tuple(literals)


def unmap_numbers(tokens: Sequence[str], literals: Sequence[str]) -> tuple:
    out = []
    for t in tokens:
        i = expr.quantity_index(t)
        out.append(literals[i] if i is not None else t)
    return tuple(out)


def _bind_literals(eq, quantities, constants):
    """Rewrite numeric literals of ``eq`` as slots or constant names.

    A literal equal to a problem quantity becomes the first such slot;
    otherwise it must match a constant value.  Returns None when a literal
    cannot be resolved.
    """
    out = []
    for tok in eq:
        if expr.is_operator(tok) or expr.is_quantity(tok):
            out.append(tok)
            continue
        v = float(tok)
        slot = next((i for i, q in enumerate(quantities) if math.isclose(q, v, rel_tol=1e-9, abs_tol=1e-12)), None)
        if slot is not None:
            out.append(expr.quantity_token(slot))
            continue
        name = next((n for n, c in constants.items() if math.isclose(c, v, rel_tol=1e-9, abs_tol=1e-12)), None)
        if name is None:
            return None
        out.append(name)
    return tuple(out)


@dataclass
class IngestReport:
    corpus: Corpus
    dropped: int = 0
    malformed: int = 0


def _parse_answer(ans) -> float:
    if isinstance(ans, (int, float)):
        return float(ans)
    s = str(ans).strip()
    v = parse_number(s)
    if v is None:
        try:
            v = float(s)
        except ValueError:
            raise FormatError(f"unparsable answer {ans!r}") from None
    return v


def ingest_math23k(path, constants: Mapping[str, float] | None = None, split: str = "train",
                   report: bool = False):
    """Read Math23K-style line-delimited records into a Corpus.

    Records whose gold equation cannot be bound to the text numbers (or the
    constant list), or whose equation does not evaluate to ``ans``, are
    dropped and counted.  Malformed records are skipped and logged.
    """
    constants = dict(DEFAULT_CONSTANTS if constants is None else constants)
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    problems, dropped, malformed = [], 0, 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pid = str(rec["id"])
            words = str(rec["segmented_text"]).split()
            eq_text = str(rec["equation"]).strip()
            if eq_text.startswith("x="):
                eq_text = eq_text[2:]
            infix = expr.infix_to_prefix(eq_text)
            answer = _parse_answer(rec["ans"])
        except (json.JSONDecodeError, KeyError, TypeError, FormatError, expr.ParseError) as exc:
            log.warning("line %d: malformed record skipped (%s)", lineno, exc)
            malformed += 1
            continue
        tokens, quantities, _ = map_numbers(words)
        eq = _bind_literals(infix, quantities, constants)
        if eq is None:
            dropped += 1
            continue
        prob = Problem(pid, tokens, quantities, eq, answer)
        if not prob.check(constants):
            dropped += 1
            continue
        problems.append(prob)
    corpus = Corpus(problems, build_vocab(problems), constants, split)
    if report:
        return IngestReport(corpus, dropped, malformed)
    return corpus


# ---------------------------------------------------------------- canonical format

def problem_to_record(p: Problem) -> dict:
    return {"id": p.id, "tokens": list(p.tokens), "quantities": list(p.quantities),
            "equation_prefix": expr.format_prefix(p.gold_equation), "answer": p.gold_answer}


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in corpus.problems:
            f.write(json.dumps(problem_to_record(p), ensure_ascii=False) + "\n")


def load_corpus(path, constants: Mapping[str, float] | None = None, split: str = "train",
                vocab: dict | None = None) -> Corpus:
    constants = dict(DEFAULT_CONSTANTS if constants is None else constants)
    problems = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    r = json.loads(line)
                    problems.append(Problem(str(r["id"]), tuple(r["tokens"]),
                                            tuple(float(q) for q in r["quantities"]),
                                            expr.parse_prefix(r["equation_prefix"]),
                                            float(r["answer"])))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    return Corpus(problems, vocab if vocab is not None else build_vocab(problems), constants, split)


# ---------------------------------------------------------------- toy generator

@dataclass(frozen=True)
class Template:
    """A problem type: (head, modifier) words, role count and annotated equation forms.

    ``forms`` pairs prefix equations over roles ``N0..`` with annotation
    weights; several forms for one template mimic annotators who write
    equivalent equations differently.
    """
    name: str
    keywords: tuple
    n_slots: int
    forms: tuple

    def pick_form(self, rng) -> tuple:
        weights = np.array([w for _, w in self.forms], dtype=float)
        i = int(rng.choice(len(self.forms), p=weights / weights.sum()))
        return expr.parse_prefix(self.forms[i][0])


TemplateSet = tuple

# ~50-token synthetic vocabulary.  A template is named by a head word plus a
# modifier word (neither alone identifies it); each number is followed by a
# role word shared by all templates, or by the distractor word.
HEADS = ("k0", "k1", "k2", "k3")
MODIFIERS = ("k4", "k5")
ROLE_WORDS = ("k6", "k7", "k8")
DISTRACTOR_WORD = "k9"
FILLERS = tuple(f"w{i}" for i in range(40))

DEFAULT_TEMPLATES: TemplateSet = (
    Template("sum", ("k0", "k4"), 2, (("+ N0 N1", 0.85), ("+ N1 N0", 0.15))),
    Template("diff", ("k0", "k5"), 2, (("− N0 N1", 1.0),)),
    Template("prod", ("k1", "k4"), 2, (("× N0 N1", 0.85), ("× N1 N0", 0.15))),
    Template("diff_b", ("k1", "k5"), 2, (("− N1 N0", 1.0),)),
    Template("times_sum", ("k2", "k4"), 3,
             (("× N0 + N1 N2", 0.8), ("+ × N0 N1 × N0 N2", 0.2))),
    Template("dist_sum", ("k2", "k5"), 3,
             (("+ × N0 N1 × N0 N2", 0.8), ("× N0 + N1 N2", 0.2))),
    Template("sum_times", ("k3", "k4"), 3,
             (("× + N0 N1 N2", 0.8), ("+ × N0 N2 × N1 N2", 0.2))),
    Template("times_sum_b", ("k3", "k5"), 3,
             (("× N0 + N1 N2", 0.85), ("× + N1 N2 N0", 0.15))),
)


def _fillers(rng, most):
    return [FILLERS[j] for j in rng.choice(len(FILLERS), size=int(rng.integers(0, most + 1)), replace=False)]


def _render_words(template: Template, literals: Sequence[str], order, rng) -> list:
    """Head word, then shuffled clauses (fillers, number, role word), modifier at a random clause boundary.

    ``order`` lists roles in text order; -1 stands for the distractor.
    """
    clauses = []
    for role in order:
        clause = _fillers(rng, 2)
        clause.append(literals[role])
        clause.append(DISTRACTOR_WORD if role < 0 else ROLE_WORDS[role])
        clauses.append(clause)
    clauses.insert(int(rng.integers(len(clauses) + 1)), [template.keywords[1]])
    words = [template.keywords[0]]
    for c in clauses:
        words.extend(c)
    words.extend(_fillers(rng, 1))
    return words


def _assign_slots(form, order):
    slot_of = {role: pos for pos, role in enumerate(order)}
    out = []
    for tok in form:
        i = expr.quantity_index(tok)
        out.append(tok if i is None else expr.quantity_token(slot_of[i]))
    return tuple(out)


def generate_toy_corpus(n_problems: int, seed: int = 0, templates: TemplateSet = DEFAULT_TEMPLATES,
                        constants: Mapping[str, float] | None = None, q_low: int = 2,
                        q_high: int = 20, distractor_rate: float = 0.5) -> Corpus:
    """Deterministic synthetic corpus; quantities are distinct integers.

    Two-role problems carry an extra unused number with probability
    ``distractor_rate``.
    """
    if n_problems <= 0:
        raise ValueError("n_problems must be positive")
    constants = dict(DEFAULT_CONSTANTS if constants is None else constants)
    rng = np.random.default_rng(seed)
    problems = []
    for k in range(n_problems):
        t = templates[int(rng.integers(len(templates)))]
        roles = list(range(t.n_slots))
        if t.n_slots < len(ROLE_WORDS) and rng.random() < distractor_rate:
            roles.append(-1)
        values = rng.choice(np.arange(q_low, q_high + 1), size=len(roles), replace=False)
        literals = {r: str(int(v)) for r, v in zip(roles, values)}
        order = [roles[int(i)] for i in rng.permutation(len(roles))]
        words = _render_words(t, literals, order, rng)
        tokens, quantities, _ = map_numbers(words)
        eq = _assign_slots(t.pick_form(rng), order)
        answer = expr.evaluate(eq, quantities, constants).value
        problems.append(Problem(f"toy-{seed}-{k}", tokens, quantities, eq, answer))
    return Corpus(problems, build_vocab(problems), constants, "train")


def raw_words(problem: Problem) -> tuple:
    """Text with slots substituted back (synthetic literals are integers)."""
    lits = [str(int(q)) if float(q).is_integer() else repr(q) for q in problem.quantities]
    return unmap_numbers(problem.tokens, lits)


def split(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    """Deterministic shuffle then partition; all parts share the vocab."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(corpus.problems)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = int(round(ratios[1] * n))
    n_dev = min(n_dev, n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:])
    return tuple(corpus.subset([corpus.problems[i] for i in idx], name)
                 for idx, name in zip(parts, ("train", "dev", "test")))
