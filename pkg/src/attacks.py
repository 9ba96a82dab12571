"""
Attacks module for VisionGuard.

Adversarial image generation against an :class:`~src.classifier.Mlp`: FGSM,
PGD, JSMA, Carlini-Wagner L2 and two-step CW variants that, after a plain CW
pass, also push the KDE likelihood up or the consistency score J down. All
attacks are deterministic for a fixed seed and keep every emitted image
inside [0, 1].
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from rich.progress import Progress

from . import classifier as clf
from .classifier import Mlp
from .errors import InvalidArgumentError, OptimizationDivergedError, SaturationError, VisionGuardError
from .image_codec import apply_transform, parse_transform

if TYPE_CHECKING:
    from .dataset_io import Dataset
    from .kde_baseline import KdeModel

__all__ = [
    'AttackKind', 'AttackConfig', 'AttackRecord', 'AttackSummary', 'WhiteboxOutcome', 'fgsm', 'pgd',
    'project_linf', 'jsma_saliency', 'jsma', 'cw_loss_surrogate', 'cw', 'cw_whitebox_kde', 'cw_whitebox_vg',
    'consistency_penalty', 'cw_grid', 'attack_group_name', 'CW_CONSTANT_GRID', 'CW_EXPONENT_GRID', 'AdversarialSet',
    'generate_adversarial_set', 'summarize',
]

logger = logging.getLogger(__name__)

AttackKind = Literal["fgsm", "pgd", "jsma", "cw", "cw_whitebox_kde", "cw_whitebox_vg"]
ATTACK_KINDS = ("fgsm", "pgd", "jsma", "cw", "cw_whitebox_kde", "cw_whitebox_vg")
CW_KINDS = ("cw", "cw_whitebox_kde", "cw_whitebox_vg")
CW_SCALES = ("linear", "log10")

# c values swept directly, and the same sweep written as base-10 exponents
CW_CONSTANT_GRID = (0.01, 1.0, 100.0)
CW_EXPONENT_GRID = (-2.0, 0.01, 2.0)

# J is computed on probabilities floored here; mirrors detector.DEFAULT_PROB_FLOOR
_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Parameters for one attack run.

    ``epsilon`` is the L-inf radius for FGSM/PGD and the per-step feature
    increment for JSMA. ``cw_constant`` is the CW trade-off constant c, read
    as an exponent (c = 10 ** cw_constant) when ``cw_scale`` is ``"log10"``.
    ``kde_margin`` and ``vg_margin`` are the margins of the two white-box
    penalties; ``vg_transform`` is the transform the attacker assumes the
    detector applies.
    """

    kind: AttackKind = "fgsm"
    epsilon: float = 0.1
    iterations: int = 1
    step_size: Optional[float] = None
    cw_constant: float = 1.0
    cw_scale: str = "linear"
    cw_confidence: float = 0.0
    learning_rate: float = 1e-2
    norm_p: int = 2
    target: Optional[int] = None
    kde_margin: float = 0.0
    vg_margin: float = 0.0
    vg_transform: str = "jpeg92"
    random_start: bool = False
    top_k: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidArgumentError(f"unknown attack {self.kind!r}; choose from {', '.join(ATTACK_KINDS)}")
        if self.epsilon < 0:
            raise InvalidArgumentError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.iterations < 1:
            raise InvalidArgumentError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size is not None and self.step_size <= 0:
            raise InvalidArgumentError(f"step_size must be positive, got {self.step_size}")
        if self.cw_scale not in CW_SCALES:
            raise InvalidArgumentError(f"cw_scale must be one of {', '.join(CW_SCALES)}, got {self.cw_scale!r}")
        if self.kind in CW_KINDS:
            if not math.isfinite(self.cw_constant):
                raise InvalidArgumentError(f"cw_constant must be finite, got {self.cw_constant}")
            if self.cw_scale == "linear" and self.cw_constant <= 0:
                raise InvalidArgumentError(
                    f"cw_constant must be positive, got {self.cw_constant} (use cw_scale log10 for exponents)"
                )
        if self.kind == "cw_whitebox_vg":
            parse_transform(self.vg_transform)
        if self.norm_p != 2:
            raise InvalidArgumentError("only the L2 norm is supported for CW")
        if self.learning_rate <= 0 or self.top_k < 2:
            raise InvalidArgumentError("learning_rate must be positive and top_k >= 2")

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0

    @property
    def effective_cw_constant(self) -> float:
        return 10.0 ** self.cw_constant if self.cw_scale == "log10" else self.cw_constant

    @property
    def parameter(self) -> float:
        """The headline parameter reported in result tables, as written in the config."""
        return self.cw_constant if self.kind in CW_KINDS else self.epsilon

    @property
    def group_name(self) -> str:
        return attack_group_name(self.kind, self.cw_scale)

    @property
    def label(self) -> str:
        return f"{self.group_name}[{self.parameter:g}]"

    def snapshot(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def attack_group_name(kind: str, cw_scale: str = "linear") -> str:
    """Attack name used in tables; exponent-scale CW runs are kept apart from linear ones."""
    return f"{kind}-log10" if kind in CW_KINDS and cw_scale == "log10" else kind


def cw_grid(kind: str = "cw", iterations: int = 200, learning_rate: float = 0.05,
            seed: int = 0) -> List[AttackConfig]:
    """Both CW sweeps: the constants as written and the same grid read as exponents."""
    configs = [AttackConfig(kind=kind, cw_constant=c, iterations=iterations, learning_rate=learning_rate, seed=seed)
               for c in CW_CONSTANT_GRID]
    configs += [AttackConfig(kind=kind, cw_constant=e, cw_scale="log10", iterations=iterations,
                             learning_rate=learning_rate, seed=seed) for e in CW_EXPONENT_GRID]
    return configs


@dataclass
class AttackRecord:
    index: int
    adversarial: np.ndarray
    attacked: bool
    success: bool
    seconds: float
    config: Dict[str, Any]
    error: Optional[str] = None


@dataclass(frozen=True)
class AttackSummary:
    attack: str
    parameter: float
    count: int
    success_rate: float
    mean_seconds: float
    median_seconds: float
    failures: int

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class WhiteboxOutcome:
    stage_one: np.ndarray
    stage_two: np.ndarray
    stage_one_misclassified: bool
    stage_two_misclassified: bool


def fgsm(model: Mlp, x, y: int, epsilon: float) -> np.ndarray:
    """x* = clip(x + epsilon * sign(grad_x J(theta, x, y)), 0, 1)."""
    if epsilon < 0:
        raise InvalidArgumentError(f"epsilon must be non-negative, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    grad = clf.loss_grad_input(model, x, y)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def project_linf(candidate: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball of radius epsilon around x intersected with [0, 1]^n."""
    return np.clip(np.clip(candidate, x - epsilon, x + epsilon), 0.0, 1.0)


def pgd(model: Mlp, x, y: int, epsilon: float, step_size: float, iterations: int,
        random_start: bool = False, seed: int = 0) -> np.ndarray:
    """Iterated gradient-sign steps, projected back after every step."""
    if epsilon < 0 or step_size <= 0 or iterations < 1:
        raise InvalidArgumentError("pgd needs epsilon >= 0, step_size > 0 and iterations >= 1")
    x = np.asarray(x, dtype=np.float64)
    adv = x.copy()
    if random_start:
        rng = np.random.default_rng(seed)
        adv = project_linf(x + rng.uniform(-epsilon, epsilon, size=x.shape), x, epsilon)
    for _ in range(iterations):
        grad = clf.loss_grad_input(model, adv, y)
        adv = project_linf(adv + step_size * np.sign(grad), x, epsilon)
    return adv


def jsma_saliency(jacobian: np.ndarray, target: int) -> np.ndarray:
    """S(x, t)[i] = g_t[i] * |sum_{j != t} g_j[i]|, zero where g_t < 0 or the sum > 0."""
    flat = jacobian.reshape(jacobian.shape[0], -1)
    g_target = flat[target]
    g_other = flat.sum(axis=0) - g_target
    admissible = (g_target >= 0) & (g_other <= 0)
    return np.where(admissible, g_target * np.abs(g_other), 0.0)


def _best_pair(jacobian: np.ndarray, target: int, domain: np.ndarray, top_k: int) -> Optional[Tuple[int, int]]:
    """Pick the feature pair to raise, restricted to the top_k candidates by |S|."""
    saliency = jsma_saliency(jacobian, target)
    candidates = np.flatnonzero(domain)
    if candidates.size < 2:
        return None
    if candidates.size > top_k:
        keep = np.argsort(-np.abs(saliency[candidates]), kind="stable")[:top_k]
        candidates = np.sort(candidates[keep])
    s = saliency[candidates]
    pair_scores = s[:, None] + s[None, :]
    np.fill_diagonal(pair_scores, -np.inf)
    flat_best = int(np.argmax(pair_scores))
    i, j = np.unravel_index(flat_best, pair_scores.shape)
    if pair_scores[i, j] <= 0:
        return None
    return int(candidates[i]), int(candidates[j])


def jsma(model: Mlp, x, target: int, epsilon: float, max_iterations: int, top_k: int = 256) -> np.ndarray:
    """Targeted saliency-map attack raising two features by epsilon per iteration."""
    if epsilon <= 0:
        raise InvalidArgumentError(f"JSMA epsilon must be positive, got {epsilon}")
    if not 0 <= target < model.num_classes:
        raise InvalidArgumentError(f"target must lie in [0, {model.num_classes}), got {target}")
    x = np.asarray(x, dtype=np.float64)
    adv = x.reshape(-1).copy()
    for _ in range(max_iterations):
        if int(np.argmax(clf.forward(model, adv))) == target:
            break
        domain = adv < 1.0
        if np.count_nonzero(domain) < 2:
            raise SaturationError("no unsaturated features left to perturb", partial=adv.reshape(x.shape))
        pair = _best_pair(clf.logit_jacobian(model, adv), target, domain, top_k)
        if pair is None:
            logger.debug("jsma: no admissible feature pair, stopping early")
            break
        adv[list(pair)] = np.minimum(adv[list(pair)] + epsilon, 1.0)
    return adv.reshape(x.shape)


def cw_loss_surrogate(logit_values: np.ndarray, label: int, kappa: float = 0.0) -> float:
    """g = max(Z_L - max_{j != L} Z_j, -kappa); g <= 0 exactly when label is not the argmax (kappa=0)."""
    z = np.asarray(logit_values, dtype=np.float64)
    others = np.delete(z, label)
    return float(max(z[label] - others.max(), -kappa))


def _cw_optimize(model: Mlp, origin: np.ndarray, label: int, config: AttackConfig, iterations: int,
                 extra: Optional[Callable[[np.ndarray], Tuple[float, np.ndarray]]] = None) -> np.ndarray:
    """Minimise ||x' - origin||^2 + c * (g(x') + extra(x')) over x' = (tanh w + 1) / 2.

    Steps use an adaptive per-coordinate learning rate without momentum. With no
    extra term the misclassified iterate of smallest L2 distance is returned,
    otherwise the misclassified iterate of lowest objective; if no iterate is
    misclassified the final one is returned.
    """
    c = config.effective_cw_constant
    kappa = config.cw_confidence
    lr = config.learning_rate
    w = np.arctanh(np.clip(2.0 * origin - 1.0, -1.0 + 1e-6, 1.0 - 1e-6))
    second_moment = np.zeros_like(w)
    decay, tiny = 0.999, 1e-8
    best, best_value = None, np.inf
    adv = origin
    for step in range(1, iterations + 1):
        tanh_w = np.tanh(w)
        adv = (tanh_w + 1.0) / 2.0
        delta = adv - origin
        z = clf.logits(model, adv)
        others = z.copy()
        others[label] = -np.inf
        runner_up = int(np.argmax(others))
        margin = z[label] - z[runner_up]
        surrogate = max(margin, -kappa)
        distance = float(np.sum(delta ** 2))
        objective = distance + c * surrogate
        grad_adv = 2.0 * delta
        if margin > -kappa:
            upstream = np.zeros_like(z)
            upstream[label], upstream[runner_up] = 1.0, -1.0
            grad_adv = grad_adv + c * clf.logits_grad_input(model, adv, upstream)
        if extra is not None:
            extra_value, extra_grad = extra(adv)
            objective += c * extra_value
            grad_adv = grad_adv + c * extra_grad
        if not np.isfinite(objective) or not np.all(np.isfinite(grad_adv)):
            raise OptimizationDivergedError(f"CW objective became non-finite at iteration {step}")

        if margin < 0:
            score = distance if extra is None else objective
            if score < best_value:
                best, best_value = adv.copy(), score

        grad_w = grad_adv * (1.0 - tanh_w ** 2) / 2.0
        second_moment = decay * second_moment + (1.0 - decay) * grad_w ** 2
        corrected = second_moment / (1.0 - decay ** step)
        w = w - lr * grad_w / (np.sqrt(corrected) + tiny)
    return np.clip(best if best is not None else adv, 0.0, 1.0)


def cw(model: Mlp, x, y: int, config: AttackConfig, iterations: Optional[int] = None) -> np.ndarray:
    """Untargeted Carlini-Wagner L2 attack with the tanh box reparametrisation."""
    x = np.asarray(x, dtype=np.float64)
    clf.check_labels(model, np.array([y]))
    steps = config.iterations if iterations is None else iterations
    if steps == 0:
        return x.copy()
    return _cw_optimize(model, x, int(y), config, steps)


def _two_stage(model: Mlp, x, y: int, config: AttackConfig, iterations: Optional[int],
               penalty: Optional[Callable[[np.ndarray], Tuple[float, np.ndarray]]]) -> WhiteboxOutcome:
    """Plain CW gives x'; CW started from x' with ``penalty`` added to the objective gives x''."""
    x = np.asarray(x, dtype=np.float64)
    stage_one = cw(model, x, y, config, iterations)
    steps = config.iterations if iterations is None else iterations
    stage_two = stage_one.copy() if steps == 0 else _cw_optimize(model, stage_one, int(y), config, steps, penalty)
    return WhiteboxOutcome(
        stage_one=stage_one,
        stage_two=stage_two,
        stage_one_misclassified=int(np.argmax(clf.forward(model, stage_one))) != y,
        stage_two_misclassified=int(np.argmax(clf.forward(model, stage_two))) != y,
    )


def cw_whitebox_kde(model: Mlp, kde: "KdeModel", x, y: int, config: AttackConfig,
                    iterations: Optional[int] = None) -> WhiteboxOutcome:
    """Two-step CW: plain CW gives x', then CW from x' with the KDE penalty gives x''.

    The penalty is m(x'') = max(-log KDE(x'') - margin, 0) under the class the
    network currently predicts for x''.
    """
    from .kde_baseline import log_density_and_grad

    margin = config.kde_margin

    def kde_penalty(adv: np.ndarray) -> Tuple[float, np.ndarray]:
        cls = int(np.argmax(clf.logits(model, adv)))
        embedding = clf.penultimate_embedding(model, adv)
        log_density, grad_embedding = log_density_and_grad(kde, cls, embedding)
        penalty = -log_density - margin
        if penalty <= 0:
            return 0.0, np.zeros_like(adv)
        return penalty, -clf.embedding_grad_input(model, adv, grad_embedding)

    return _two_stage(model, x, y, config, iterations, None if margin == np.inf else kde_penalty)


def _kl_and_logit_grads(p: np.ndarray, q: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """KL(p || q) for p = softmax(a), q = softmax(b), with its gradients w.r.t. a and b."""
    log_ratio = np.log(p / q)
    kl = float(np.sum(p * log_ratio))
    return kl, p * (log_ratio - kl), q - p


def consistency_penalty(model: Mlp, x, transformed) -> Tuple[float, np.ndarray]:
    """J(x, T(x)) and its gradient w.r.t. x, passing the gradient straight through T.

    T (JPEG or median) is treated as x plus a constant offset, so d T(x) / dx is
    taken to be the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    transformed = np.asarray(transformed, dtype=np.float64)
    p = np.maximum(clf.forward(model, x), _PROB_FLOOR)
    q = np.maximum(clf.forward(model, transformed), _PROB_FLOOR)
    p, q = p / p.sum(), q / q.sum()
    forward_kl, grad_a, grad_b = _kl_and_logit_grads(p, q)
    backward_kl, back_b, back_a = _kl_and_logit_grads(q, p)
    if backward_kl < forward_kl:
        grad_a, grad_b = back_a, back_b
    value = max(min(forward_kl, backward_kl), 0.0)
    grad = clf.logits_grad_input(model, x, grad_a) + clf.logits_grad_input(model, transformed, grad_b)
    return value, grad


def cw_whitebox_vg(model: Mlp, x, y: int, config: AttackConfig, iterations: Optional[int] = None,
                   seed: Optional[int] = None) -> WhiteboxOutcome:
    """Two-step CW against VisionGuard: the second stage adds max(J(x'', T(x'')) - margin, 0).

    T is ``config.vg_transform``, the transform the attacker believes the
    detector uses. A pool is redrawn on every iteration from ``seed``.
    """
    spec = parse_transform(config.vg_transform)
    margin = config.vg_margin
    draws = itertools.count(config.seed if seed is None else seed)

    def vg_penalty(adv: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = consistency_penalty(model, adv, apply_transform(adv, spec, next(draws)))
        if value - margin <= 0:
            return 0.0, np.zeros_like(adv)
        return value - margin, grad

    return _two_stage(model, x, y, config, iterations, None if margin == np.inf else vg_penalty)


def _run_attack(model: Mlp, x: np.ndarray, y: int, index: int, config: AttackConfig,
                kde: Optional["KdeModel"]) -> np.ndarray:
    if config.kind == "fgsm":
        return fgsm(model, x, y, config.epsilon)
    if config.kind == "pgd":
        return pgd(model, x, y, config.epsilon, config.resolved_step_size, config.iterations,
                   random_start=config.random_start, seed=config.seed + index)
    if config.kind == "jsma":
        target = config.target if config.target is not None else (y + 1) % model.num_classes
        return jsma(model, x, target, config.epsilon, config.iterations, config.top_k)
    if config.kind == "cw":
        return cw(model, x, y, config)
    if config.kind == "cw_whitebox_vg":
        return cw_whitebox_vg(model, x, y, config, seed=config.seed + index).stage_two
    if kde is None:
        raise InvalidArgumentError("cw_whitebox_kde needs a fitted KDE model")
    return cw_whitebox_kde(model, kde, x, y, config).stage_two


def summarize(records: Sequence[AttackRecord], config: AttackConfig) -> AttackSummary:
    seconds = np.array([r.seconds for r in records], dtype=np.float64)
    return AttackSummary(
        attack=config.group_name,
        parameter=config.parameter,
        count=len(records),
        success_rate=float(np.mean([r.success for r in records])) if records else 0.0,
        mean_seconds=float(seconds.mean()) if records else 0.0,
        median_seconds=float(np.median(seconds)) if records else 0.0,
        failures=sum(1 for r in records if r.error is not None),
    )


@dataclass
class AdversarialSet:
    records: List[AttackRecord] = field(default_factory=list)
    summaries: List[AttackSummary] = field(default_factory=list)


def generate_adversarial_set(model: Mlp, dataset: "Dataset", configs: Sequence[AttackConfig],
                             kde: Optional["KdeModel"] = None) -> AdversarialSet:
    """Attack every image with every config; per-image failures are recorded, not raised."""
    result = AdversarialSet()
    if not configs:
        return result
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot attack an empty dataset")
    with Progress(transient=True, disable=not logger.isEnabledFor(logging.INFO)) as progress:
        for config in configs:
            task = progress.add_task(config.label, total=len(dataset))
            records = []
            snapshot = config.snapshot()
            for index in range(len(dataset)):
                x, y = dataset.images[index], int(dataset.labels[index])
                error = None
                start = time.perf_counter()
                try:
                    adv = _run_attack(model, x, y, index, config, kde)
                except SaturationError as e:
                    adv, error = e.partial, str(e)
                except VisionGuardError as e:
                    adv, error = x.copy(), str(e)
                seconds = time.perf_counter() - start
                if error is not None:
                    logger.warning("%s failed on image %d: %s", config.label, index, error)
                adv = np.clip(adv, 0.0, 1.0)
                success = int(np.argmax(clf.forward(model, adv))) != y
                records.append(AttackRecord(index, adv, True, success, seconds, snapshot, error))
                progress.advance(task)
            summary = summarize(records, config)
            logger.info("%s: success rate %.3f, %.5f s/image", config.label, summary.success_rate,
                        summary.mean_seconds)
            result.records.extend(records)
            result.summaries.append(summary)
    return result
