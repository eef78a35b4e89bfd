"""L-infinity PGD with interchangeable gradient oracles.

A gradient oracle maps ``(x, labels, example_ids, step)`` to the gradient of
the cross-entropy ``loss(f(x), labels)`` with respect to ``x``, row by row.
Three oracles are provided:

``vanilla``
    exact backprop through the undefended network.
``bpda``
    the same gradient, used against the defended model: the stochastic
    pruning is removed from the backward pass entirely while success is
    judged on the defended model.
``through_sap``
    exact gradient through randomly pruned forward passes (fresh masks for
    every gradient sample), averaged over ``eot_samples`` draws.

A judge maps ``(x, example_ids, query)`` to predicted labels; PGD calls it at
its checkpoints to keep the first successful iterate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from saplab import gradcore, rng
from saplab.errors import ConfigurationError
from saplab.network import Network, predict_clean
from saplab.sap import SapConfig, averaged_predict, sap_hook

ORACLES = ("vanilla", "bpda", "through_sap")

GradientOracle = Callable[[np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]
Judge = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    step_size: float | None = None  # None -> epsilon / 8
    iterations: int = 200
    targeted: bool = False
    target_seed: int = 0
    oracle: str = "bpda"
    eot_samples: int = 1
    eval_every: int = 10
    eval_passes: int | None = None  # None -> the defended config's own passes

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 8)
        if self.step_size < 0 or (self.epsilon > 0 and not 0 < self.step_size <= self.epsilon):
            raise ConfigurationError(f"step_size must lie in (0, epsilon], got {self.step_size}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if self.oracle not in ORACLES:
            raise ConfigurationError(f"oracle must be one of {ORACLES}, got {self.oracle!r}")
        if self.eot_samples < 1:
            raise ConfigurationError(f"eot_samples must be >= 1, got {self.eot_samples}")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.eval_passes is not None and self.eval_passes < 1:
            raise ConfigurationError(f"eval_passes must be >= 1, got {self.eval_passes}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown attack config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdvResult:
    x_adv: np.ndarray
    predictions: np.ndarray  # judged label of each returned x_adv
    success: np.ndarray
    iterations_used: np.ndarray
    checkpoint_steps: list[int] = field(default_factory=list)
    # judged labels per checkpoint; -1 for examples already finished
    checkpoint_predictions: np.ndarray | None = None


@dataclass(frozen=True)
class AttackStats:
    n: int
    success_rate: float
    untargeted_success: float
    targeted_success: float | None
    adv_accuracy: float
    stderr: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def binomial_stderr(rate: float, n: int) -> float:
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / n) if n else 0.0


# -- oracles ---------------------------------------------------------------


def _loss_gradient(network, x, labels, hook=None) -> np.ndarray:
    logits, tape = gradcore.forward(network, x, hook)
    _, dlogits = gradcore.softmax_cross_entropy(logits, labels)
    return gradcore.backward(network, tape, dlogits)


def oracle_vanilla(network: Network) -> GradientOracle:
    def oracle(x, labels, example_ids=None, step=0):
        return _loss_gradient(network, x, labels)

    oracle.name = "vanilla"  # type: ignore[attr-defined]
    return oracle


def oracle_bpda(network: Network) -> GradientOracle:
    """Backward pass of the undefended network; the defended model only enters
    through the judge that PGD uses to score iterates."""

    def oracle(x, labels, example_ids=None, step=0):
        return _loss_gradient(network, x, labels)

    oracle.name = "bpda"  # type: ignore[attr-defined]
    return oracle


def oracle_through_sap(network: Network, sap_config: SapConfig, eot_samples: int = 1) -> GradientOracle:
    if eot_samples < 1:
        raise ConfigurationError(f"eot_samples must be >= 1, got {eot_samples}")

    def oracle(x, labels, example_ids=None, step=0):
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0] if x.ndim == 2 else 1
        ids = np.zeros(n, dtype=np.int64) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
        total = None
        for e in range(eot_samples):
            hook = sap_hook(sap_config, ids, step, e, domain=rng.DOMAIN_ATTACK_GRAD)
            g = _loss_gradient(network, x, labels, hook)
            total = g if total is None else total + g
        return total / eot_samples

    oracle.name = "through_sap"  # type: ignore[attr-defined]
    return oracle


def make_oracle(name: str, network: Network, sap_config: SapConfig | None = None, eot_samples: int = 1):
    if name == "vanilla":
        return oracle_vanilla(network)
    if name == "bpda":
        return oracle_bpda(network)
    if name == "through_sap":
        if sap_config is None:
            raise ConfigurationError("through_sap oracle needs a SAP config")
        return oracle_through_sap(network, sap_config, eot_samples)
    raise ConfigurationError(f"unknown oracle {name!r}")


# -- judges ----------------------------------------------------------------


def clean_judge(network: Network) -> Judge:
    def judge(x, example_ids=None, query=0):
        return predict_clean(network, x)[0]

    return judge


def defended_judge(network: Network, sap_config: SapConfig, fresh_queries: bool = False) -> Judge:
    """Pass-averaged SAP decision. By default every query of an example reuses
    that example's streams, so the defended model is a fixed function of
    ``(x, example id)``; ``fresh_queries`` re-keys the streams per query."""

    def judge(x, example_ids=None, query=0):
        return averaged_predict(network, x, sap_config, example_ids, query if fresh_queries else 0)[0]

    return judge


# -- PGD -------------------------------------------------------------------


def draw_targets(labels, n_classes: int, seed: int, example_ids=None) -> np.ndarray:
    """Uniform target from the ``n_classes - 1`` wrong classes, per example."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(labels)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    u = rng.uniforms(rng.stream_key(seed, rng.DOMAIN_TARGET, ids), 1)[:, 0]
    t = np.floor(u * (n_classes - 1)).astype(np.int64)
    return t + (t >= labels)


def project(x_new: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the epsilon ball around ``x_orig``, then into ``[0, 1]``."""
    return np.clip(np.clip(x_new, x_orig - epsilon, x_orig + epsilon), 0.0, 1.0)


def _is_success(pred, labels, targets, targeted: bool) -> np.ndarray:
    return pred == targets if targeted else pred != labels


def pgd(
    oracle: GradientOracle,
    x,
    labels,
    config: AttackConfig,
    judge: Judge,
    example_ids=None,
    targets=None,
) -> AdvResult:
    """Signed-gradient ascent on the loss (descent on the target's loss when
    targeted), projected every step; starts at ``x`` with no random start.

    The judge scores step 0, every ``eval_every`` steps and the final step with
    ``query = step``. An example stops at its first successful checkpoint;
    otherwise the final iterate is returned.
    """
    if config.epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {config.epsilon}")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    single = x.ndim == 1
    if single:
        x, labels = x[None, :], labels.reshape(1)
    n = x.shape[0]
    ids = np.arange(n, dtype=np.int64) if example_ids is None else np.asarray(example_ids, dtype=np.int64).reshape(n)
    if config.targeted:
        if targets is None:
            raise ConfigurationError("targeted attack needs target labels")
        goal = np.asarray(targets, dtype=np.int64).reshape(n)
    else:
        goal = labels
    sign = -1.0 if config.targeted else 1.0

    x_cur = x.copy()
    pred = np.asarray(judge(x_cur, ids, 0))
    success = _is_success(pred, labels, goal, config.targeted)
    used = np.zeros(n, dtype=np.int64)
    steps = [0]
    history = [pred.copy()]
    active = ~success

    for step in range(1, config.iterations + 1):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        g = oracle(x_cur[rows], goal[rows], ids[rows], step)
        stepped = x_cur[rows] + config.step_size * sign * np.sign(g)
        x_cur[rows] = project(stepped, x[rows], config.epsilon)
        used[rows] = step
        if step % config.eval_every == 0 or step == config.iterations:
            judged = np.asarray(judge(x_cur[rows], ids[rows], step))
            pred[rows] = judged
            hit = _is_success(judged, labels[rows], goal[rows], config.targeted)
            success[rows[hit]] = True
            active[rows[hit]] = False
            snapshot = np.full(n, -1, dtype=np.int64)
            snapshot[rows] = judged
            steps.append(step)
            history.append(snapshot)

    result = AdvResult(x_cur, pred, success, used, steps, np.stack(history))
    if single:
        result.x_adv, result.predictions = x_cur[0], pred[0]
        result.success, result.iterations_used = success[0], used[0]
    return result


def summarize(result: AdvResult, labels, targets=None, targeted: bool = False) -> AttackStats:
    labels = np.atleast_1d(np.asarray(labels))
    pred = np.atleast_1d(result.predictions)
    n = len(labels)
    untargeted = float(np.mean(pred != labels))
    hit = float(np.mean(pred == np.atleast_1d(targets))) if targets is not None else None
    rate = hit if targeted else untargeted
    return AttackStats(n, rate, untargeted, hit, float(np.mean(pred == labels)), binomial_stderr(rate, n))


def transfer_attack(
    source_network: Network,
    defended_config: SapConfig,
    x,
    labels,
    attack_config: AttackConfig,
    example_ids=None,
    targets=None,
    query: int = 0,
) -> tuple[AdvResult, AttackStats]:
    """Craft on the undefended network (judged by it), then score the crafted
    points once on the defended, pass-averaged model."""
    x = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x)) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    crafted = pgd(
        oracle_vanilla(source_network),
        x,
        labels,
        replace(attack_config, oracle="vanilla"),
        clean_judge(source_network),
        ids,
        targets,
    )
    defended = averaged_predict(source_network, crafted.x_adv, defended_config, ids, query)[0]
    result = AdvResult(
        crafted.x_adv,
        defended,
        _is_success(defended, np.asarray(labels), targets if attack_config.targeted else np.asarray(labels), attack_config.targeted),
        crafted.iterations_used,
        crafted.checkpoint_steps,
        crafted.checkpoint_predictions,
    )
    return result, summarize(result, labels, targets, attack_config.targeted)
