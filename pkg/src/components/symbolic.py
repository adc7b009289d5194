"""
Module for distilling trained activations into closed-form expressions.

Each activation curve is approximated by alpha3 * y(alpha1 * x + alpha2) + alpha4
for every candidate y in a registry, the best R^2 wins, low-amplitude
activations are dropped and the remaining terms are rendered as one formula.

FORMULA GRAMMAR:
================
    formula := 'f =' term (('+'|'-') term)*
    term    := COEFF '*' FUNC '(' COEFF '*' VAR (('+'|'-') COEFF)? ')'
             | COEFF '*' VAR
             | COEFF
VAR is x1..xV (1-based feature index). FUNC is one of pow2, pow3, pow4, exp,
ln, sqrt, tanh, sin. Terms of the candidate x are folded into COEFF '*' VAR
with their shift merged into the constant.
"""

import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.components.errors import InputError
from src.components.kan_model import GcphModel, per_feature_curve
from src.components.spline_core import activation_values

NUM_ALPHA1 = 101
NUM_ALPHA2 = 101
REFINE_STEPS = 200
CURVE_POINTS = 201
AMPLITUDE_THRESHOLD = 0.05


@dataclass(frozen=True)
class CandidateFn:
    """A candidate closed form y with its admissible argument domain."""

    name: str
    token: str
    func: Callable[[np.ndarray], np.ndarray]
    domain: Callable[[np.ndarray], np.ndarray] = field(default=lambda z: np.ones(np.shape(z), dtype=bool))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.func(z)


class CandidateRegistry:
    """Registry of candidate functions, kept in registration order."""

    def __init__(self):
        self.candidates: Dict[str, CandidateFn] = {}
        self._register_default_candidates()

    def _register_default_candidates(self):
        self.register(CandidateFn("x", "x", lambda z: z))
        self.register(CandidateFn("x^2", "pow2", lambda z: z**2))
        self.register(CandidateFn("x^3", "pow3", lambda z: z**3))
        self.register(CandidateFn("x^4", "pow4", lambda z: z**4))
        self.register(CandidateFn("exp", "exp", np.exp))
        self.register(CandidateFn("ln", "ln", np.log, lambda z: z > 0))
        self.register(CandidateFn("sqrt", "sqrt", np.sqrt, lambda z: z >= 0))
        self.register(CandidateFn("tanh", "tanh", np.tanh))
        self.register(CandidateFn("sin", "sin", np.sin))

    def register(self, candidate: CandidateFn):
        self.candidates[candidate.name] = candidate

    def get(self, name: str) -> CandidateFn:
        if name not in self.candidates:
            raise InputError(f"Unknown candidate function '{name}'")
        return self.candidates[name]

    def by_token(self, token: str) -> CandidateFn:
        for candidate in self.candidates.values():
            if candidate.token == token:
                return candidate
        raise InputError(f"Unknown function token '{token}'")

    def names(self) -> List[str]:
        return list(self.candidates)


DEFAULT_REGISTRY = CandidateRegistry()


@dataclass(frozen=True)
class SymbolicTerm:
    feature: int
    candidate: str
    alpha: Tuple[float, float, float, float]
    r2: float


@dataclass(frozen=True)
class SymbolicModel:
    """Retained terms, dropped features and the merged additive constant."""

    terms: Tuple[SymbolicTerm, ...]
    dropped: Tuple[int, ...]
    constant: float
    feature_names: Tuple[str, ...] = ()


def _r2(sse: float, sst: float) -> float:
    if sst < 1e-12:
        return 1.0 if sse < 1e-12 else 0.0
    return 1.0 - sse / sst


def _alpha1_grid() -> np.ndarray:
    positive = np.geomspace(0.1, 10.0, (NUM_ALPHA1 - 1) // 2)
    return np.concatenate([-positive[::-1], [0.0], positive])


def _alpha2_grid(alpha1: float, max_abs_x: float) -> np.ndarray:
    span = abs(alpha1) * max_abs_x + math.pi
    return np.linspace(-span, span, NUM_ALPHA2)


def _fit_rows(Z: np.ndarray, ys: np.ndarray, candidate: CandidateFn) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Least-squares (alpha3, alpha4) for every row of arguments Z.

    Returns:
        Tuple of (sse, alpha3, alpha4) arrays; infeasible rows get sse = inf.
    """
    with np.errstate(all="ignore"):
        feasible = candidate.domain(Z).all(axis=1)
        Y = np.where(candidate.domain(Z), candidate(Z), 0.0)
        feasible &= np.all(np.isfinite(Y), axis=1)
        Y = np.where(feasible[:, None], Y, 0.0)
        y_mean = Y.mean(axis=1)
        centered = Y - y_mean[:, None]
        var = np.einsum("ij,ij->i", centered, centered)
        target = ys - ys.mean()
        cov = centered @ target
        sst = float(target @ target)
        flat = var <= 1e-300
        alpha3 = np.where(flat, 0.0, cov / np.where(flat, 1.0, var))
        sse = np.where(flat, sst, sst - cov * alpha3)
    alpha4 = ys.mean() - alpha3 * y_mean
    sse = np.where(feasible & np.isfinite(sse), np.maximum(sse, 0.0), np.inf)
    return sse, alpha3, alpha4


def _point_fit(candidate: CandidateFn, xs: np.ndarray, ys: np.ndarray, a1: float, a2: float) -> Tuple[float, float, float]:
    sse, a3, a4 = _fit_rows((a1 * xs + a2)[None, :], ys, candidate)
    if not np.isfinite(sse[0]):
        return np.inf, 0.0, 0.0
    residual = ys - (a3[0] * candidate(a1 * xs + a2) + a4[0])
    return float(residual @ residual), float(a3[0]), float(a4[0])


def affine_fit(candidate: CandidateFn, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Fit alpha3 * y(alpha1 * x + alpha2) + alpha4 to (xs, ys).

    A coarse grid over (alpha1, alpha2) with (alpha3, alpha4) solved in closed
    form is refined by coordinate descent with a shrinking step.

    Returns:
        Tuple[np.ndarray, float]: alpha = (a1, a2, a3, a4) and R^2; R^2 is
        -inf when no grid point keeps the arguments inside the domain.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.shape != ys.shape or xs.shape[0] < 8:
        raise InputError("affine_fit needs xs and ys of equal length >= 8")
    if np.all(xs == xs[0]):
        raise InputError("affine_fit needs at least two distinct xs")
    sst = float(np.sum((ys - ys.mean()) ** 2))
    max_abs_x = float(np.max(np.abs(xs)))

    best = (np.inf, 0.0, 0.0)
    for a1 in _alpha1_grid():
        a2s = _alpha2_grid(a1, max_abs_x)
        sse, _, _ = _fit_rows(a1 * xs[None, :] + a2s[:, None], ys, candidate)
        k = int(np.argmin(sse))
        if sse[k] < best[0]:
            best = (float(sse[k]), float(a1), float(a2s[k]))
    if not np.isfinite(best[0]):
        logger.debug(f"Candidate {candidate.name} infeasible on the sampled range")
        return np.zeros(4), -np.inf

    _, a1, a2 = best
    current, a3, a4 = _point_fit(candidate, xs, ys, a1, a2)
    step1 = max(0.1 * abs(a1), 0.01)
    step2 = (abs(a1) * max_abs_x + math.pi) * 2.0 / (NUM_ALPHA2 - 1)
    for _ in range(REFINE_STEPS):
        trials = [(a1 + step1, a2), (a1 - step1, a2), (a1, a2 + step2), (a1, a2 - step2)]
        results = [_point_fit(candidate, xs, ys, t1, t2) for t1, t2 in trials]
        k = int(np.argmin([r[0] for r in results]))
        if results[k][0] < current:
            (a1, a2), (current, a3, a4) = trials[k], results[k]
        else:
            step1 *= 0.5
            step2 *= 0.5
    return np.array([a1, a2, a3, a4]), _r2(current, sst)


def fit_candidates(
    xs: np.ndarray,
    ys: np.ndarray,
    candidates: Optional[Sequence[str]] = None,
    registry: CandidateRegistry = DEFAULT_REGISTRY,
) -> List[Tuple[str, np.ndarray, float]]:
    """Run affine_fit for each candidate, in registry order."""
    names = registry.names() if candidates is None else list(candidates)
    results = []
    for name in names:
        alpha, r2 = affine_fit(registry.get(name), xs, ys)
        logger.debug(f"Candidate {name}: R2={r2:.6f}")
        results.append((name, alpha, r2))
    return results


def symbolify(
    m: GcphModel,
    train_X: np.ndarray,
    candidates: Optional[Sequence[str]] = None,
    registry: CandidateRegistry = DEFAULT_REGISTRY,
    amplitude_threshold: float = AMPLITUDE_THRESHOLD,
) -> SymbolicModel:
    """
    Replace every activation by its best closed form.

    Each feature is swept over CURVE_POINTS uniform points of its training
    range with all other features at 0. Terms whose curve amplitude is below
    amplitude_threshold are dropped and replaced by their mean value.
    """
    train_X = np.asarray(train_X, dtype=float)
    if train_X.ndim != 2 or train_X.shape[1] != m.num_features or train_X.shape[0] == 0:
        raise InputError(f"train_X must be a nonempty matrix with {m.num_features} columns")
    zeros = np.array([activation_values(a, np.zeros(1))[0] for a in m.activations])
    terms, dropped = [], []
    constant = -m.centering_offset
    for v in range(m.num_features):
        xs = np.linspace(train_X[:, v].min(), train_X[:, v].max(), CURVE_POINTS)
        ys = per_feature_curve(m, v, xs)
        # curve = phi_v(x) + sum of the other activations at 0 - centering
        others = zeros.sum() - zeros[v] - m.centering_offset
        amplitude = float(ys.max() - ys.min())
        if amplitude < amplitude_threshold:
            dropped.append(v)
            constant += float(ys.mean() - others)
            logger.debug(f"Feature {v + 1} dropped, amplitude {amplitude:.4f}")
            continue
        results = fit_candidates(xs, ys, candidates, registry)
        name, alpha, r2 = max(results, key=lambda r: r[2])
        alpha = alpha.copy()
        alpha[3] -= others
        constant += float(alpha[3])
        terms.append(SymbolicTerm(v, name, tuple(float(a) for a in alpha), float(r2)))
        logger.info(f"Feature {v + 1} ({m.feature_names[v]}): {name}, R2={r2:.4f}")
    return SymbolicModel(tuple(terms), tuple(dropped), constant, m.feature_names)


def symbolic_log_risk(
    sm: SymbolicModel, X: np.ndarray, registry: CandidateRegistry = DEFAULT_REGISTRY
) -> np.ndarray:
    """Evaluate the unrounded symbolic formula on rows of X."""
    X = np.asarray(X, dtype=float)
    out = np.full(X.shape[0], sm.constant)
    for term in sm.terms:
        a1, a2, a3, _ = term.alpha
        with np.errstate(all="ignore"):
            out += a3 * registry.get(term.candidate)(a1 * X[:, term.feature] + a2)
    return out


def normalized_alpha(term: SymbolicTerm) -> Tuple[float, float, float, float]:
    """alpha with the phase of sin terms reduced into [0, 2*pi)."""
    a1, a2, a3, a4 = term.alpha
    if term.candidate == "sin":
        a2 = a2 % (2 * math.pi)
    return a1, a2, a3, a4


def _round(value: float, decimals: int) -> Decimal:
    quantum = Decimal(1).scaleb(-decimals)
    rounded = Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP)
    return rounded + 0  # folds -0 into 0


def _fmt(value: Decimal) -> str:
    return str(abs(value)) if value == 0 else str(value)


def render_formula(
    sm: SymbolicModel, decimals: int = 2, registry: CandidateRegistry = DEFAULT_REGISTRY
) -> str:
    """Render the model as text following the module grammar."""
    pieces: List[Tuple[Decimal, str]] = []
    constant = sm.constant
    for term in sorted(sm.terms, key=lambda t: t.feature):
        a1, a2, a3, _ = term.alpha
        var = f"x{term.feature + 1}"
        if term.candidate == "x":
            pieces.append((_round(a3 * a1, decimals), var))
            constant += a3 * a2
            continue
        token = registry.get(term.candidate).token
        inner = f"{_fmt(_round(a1, decimals))}*{var}"
        shift = _round(a2, decimals)
        if shift != 0:
            inner += f" {'-' if shift < 0 else '+'} {_fmt(abs(shift))}"
        pieces.append((_round(a3, decimals), f"{token}({inner})"))

    text = "f ="
    for k, (coeff, body) in enumerate(pieces):
        if k == 0:
            text += f" {'-' if coeff < 0 else ''}{_fmt(abs(coeff))}*{body}"
        else:
            text += f" {'-' if coeff < 0 else '+'} {_fmt(abs(coeff))}*{body}"
    const = _round(constant, decimals)
    if not pieces:
        text += f" {_fmt(const)}"
    elif const != 0:
        text += f" {'-' if const < 0 else '+'} {_fmt(abs(const))}"
    return text


_TOKEN_RE = re.compile(r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[=*()+\-]))")


def _tokenize(text: str) -> List[str]:
    tokens, pos = [], 0
    text = text.strip()
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise InputError(f"Unexpected character at position {pos} in formula: {text!r}")
        tokens.append(match.group(match.lastgroup))
        pos = match.end()
    return tokens


class _FormulaParser:
    def __init__(self, tokens: List[str], registry: CandidateRegistry):
        self.tokens = tokens
        self.pos = 0
        self.registry = registry

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: Optional[str] = None) -> str:
        token = self.peek()
        if token is None or (expected is not None and token != expected):
            raise InputError(f"Formula parse error: expected {expected!r}, got {token!r}")
        self.pos += 1
        return token

    def number(self) -> float:
        sign = 1.0
        if self.peek() == "-":
            self.take("-")
            sign = -1.0
        return sign * float(self.take())

    @staticmethod
    def variable(token: str) -> int:
        if not re.fullmatch(r"x\d+", token):
            raise InputError(f"Expected a variable, got {token!r}")
        return int(token[1:]) - 1

    def term(self, sign: float) -> Callable[[np.ndarray], np.ndarray]:
        coeff = sign * self.number()
        if self.peek() != "*":
            return lambda X: np.full(X.shape[0], coeff)
        self.take("*")
        name = self.take()
        if self.peek() != "(":
            v = self.variable(name)
            return lambda X: coeff * X[:, v]
        func = self.registry.by_token(name)
        self.take("(")
        a1 = self.number()
        self.take("*")
        v = self.variable(self.take())
        a2 = 0.0
        if self.peek() in ("+", "-"):
            a2 = (1.0 if self.take() == "+" else -1.0) * self.number()
        self.take(")")
        return lambda X: coeff * func(a1 * X[:, v] + a2)

    def formula(self) -> Callable[[np.ndarray], np.ndarray]:
        self.take("f")
        self.take("=")
        parts = [self.term(1.0)]
        while self.peek() in ("+", "-"):
            sign = 1.0 if self.take() == "+" else -1.0
            parts.append(self.term(sign))
        if self.peek() is not None:
            raise InputError(f"Trailing tokens in formula: {self.tokens[self.pos:]}")
        return lambda X: sum(p(np.asarray(X, dtype=float)) for p in parts)


def parse_formula(text: str, registry: CandidateRegistry = DEFAULT_REGISTRY) -> Callable[[np.ndarray], np.ndarray]:
    """Parse a rendered formula into a function of a covariate matrix."""
    return _FormulaParser(_tokenize(text), registry).formula()


def symbolic_to_dict(sm: SymbolicModel) -> dict:
    return {
        "terms": [
            {"feature": t.feature, "candidate": t.candidate, "alpha": list(t.alpha), "r2": t.r2}
            for t in sm.terms
        ],
        "dropped": list(sm.dropped),
        "constant": sm.constant,
    }
