"""Training objectives with values and analytic gradients.

Covers plain cross entropy, uniform and text-guided label smoothing,
proxy matching (tes_m), class-level distribution transfer (tes_c), the
full instance-level objective (tes), the text-projection loss, and
zero-shot prediction from text proxies.  Every gradient here is covered
by a finite-difference check in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRowError, ParameterError, ShapeError
from .model import (
    ADAPTER,
    CLASSIFIER,
    HEAD,
    LinearAligner,
    ProjectionHead,
    TesModel,
    VisionClassifier,
)
from .ndcore import as_matrix, l2_normalize_cols, l2_normalize_rows, log_softmax_rows, softmax_rows

LOSS_KINDS = ("CE", "LS", "TLS", "TES_M", "TES_C", "TES")

#: loss kinds that require a text proxy set
PROXY_LOSSES = frozenset({"TLS", "TES_M", "TES_C", "TES"})


@dataclass
class Hyperparams:
    """Objective weights and temperatures.

    lambda_v mixes cross entropy with the instance-level distillation
    term, lambda_t weights the text-projection loss, tau_text / tau_vision
    are the text and vision temperatures of the class-level distributions,
    reg_lambda weighs the tes_m / tes_c regularizers, and ls_epsilon is
    the label-smoothing mass.
    """

    lambda_v: float = 0.1
    lambda_t: float = 0.7
    tau_text: float = 0.03
    tau_vision: float = 1.0
    reg_lambda: float = 1.0
    ls_epsilon: float = 0.1
    propagate_lt_to_adapter: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_v <= 1.0:
            raise ParameterError(f"lambda_v must be in [0,1], got {self.lambda_v}")
        if self.lambda_t < 0.0:
            raise ParameterError(f"lambda_t must be >= 0, got {self.lambda_t}")
        if not self.tau_text > 0.0:
            raise ParameterError(f"tau_text must be > 0, got {self.tau_text}")
        if not self.tau_vision > 0.0:
            raise ParameterError(f"tau_vision must be > 0, got {self.tau_vision}")
        if self.reg_lambda < 0.0:
            raise ParameterError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if not 0.0 <= self.ls_epsilon < 1.0:
            raise ParameterError(f"ls_epsilon must be in [0,1), got {self.ls_epsilon}")


@dataclass
class LossOutput:
    """Scalar objective value plus flat gradients per parameter group."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    per_example: np.ndarray | None = None


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(f"labels must lie in [0, {n_classes}), got range "
                             f"[{labels.min()}, {labels.max()}]")
    return labels


def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy over rows.

    Returns (value, dlogits, per_example) with dlogits already divided by
    the batch size, i.e. the gradient of the mean.
    """
    logits = as_matrix(logits, "logits")
    labels = _check_labels(labels, logits.shape[1])
    logp = log_softmax_rows(logits)
    per_example = -logp[np.arange(labels.size), labels]
    value = float(per_example.mean())
    dlogits = (np.exp(logp) - _onehot(labels, logits.shape[1])) / labels.size
    return value, dlogits, per_example


def soft_ce_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean cross entropy against row-stochastic soft targets."""
    logits = as_matrix(logits, "logits")
    targets = as_matrix(targets, "targets")
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    logp = log_softmax_rows(logits)
    per_example = -(targets * logp).sum(axis=1)
    value = float(per_example.mean())
    dlogits = (np.exp(logp) - targets) / logits.shape[0]
    return value, dlogits, per_example


def smoothed_targets(
    labels: np.ndarray,
    n_classes: int,
    eps: float,
    mode: str = "uniform",
    p_text_class: np.ndarray | None = None,
) -> np.ndarray:
    """Label-smoothing target rows, uniform or text-guided."""
    if not 0.0 <= eps < 1.0:
        raise ParameterError(f"eps must be in [0,1), got {eps}")
    labels = _check_labels(labels, n_classes)
    onehot = _onehot(labels, n_classes)
    if mode == "uniform":
        return (1.0 - eps) * onehot + eps / n_classes
    if mode == "text":
        if p_text_class is None:
            raise ParameterError("text mode requires the class-level text distribution")
        p = as_matrix(p_text_class, "P_text_class")
        if p.shape != (n_classes, n_classes):
            raise ShapeError(f"P_text_class must be ({n_classes},{n_classes}), got {p.shape}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
            raise ParameterError("P_text_class rows must be a probability distribution")
        return (1.0 - eps) * onehot + eps * p[labels]
    raise ParameterError(f"unknown smoothing mode {mode!r}")


def class_distributions(proxies: np.ndarray, temperature: float) -> np.ndarray:
    """Class-over-class distribution from pairwise proxy similarities.

    Proxies are columns; each is unit-normalized, then row j is the
    softmax over k of cos(proxy_j, proxy_k) / temperature.
    """
    proxies = as_matrix(proxies, "proxies")
    norms = np.linalg.norm(proxies, axis=0)
    bad = np.nonzero(norms <= 1e-12)[0]
    if bad.size:
        raise DegenerateRowError(f"proxy column {int(bad[0])} has near-zero norm")
    tilde = proxies / norms[None, :]
    return softmax_rows(tilde.T @ tilde, temperature)


def instance_vision_distribution(x: np.ndarray, clf: VisionClassifier) -> np.ndarray:
    """Per-example distribution over classes: softmax of raw logits x_i.w_k."""
    x = as_matrix(x, "X")
    if x.shape[1] != clf.dim:
        raise ShapeError(f"feature dim {x.shape[1]} != classifier dim {clf.dim}")
    return softmax_rows(x @ clf.w)


def instance_text_distribution(
    x_proj: np.ndarray, z_tilde: np.ndarray, tau_text: float
) -> np.ndarray:
    """Per-example distribution over fixed unit-norm text proxies."""
    x_proj = as_matrix(x_proj, "X_proj")
    z_tilde = as_matrix(z_tilde, "Z_tilde")
    if np.max(np.abs(np.linalg.norm(x_proj, axis=1) - 1.0)) > 1e-6:
        raise ParameterError("X_proj rows must be unit-normalized")
    if np.max(np.abs(np.linalg.norm(z_tilde, axis=0) - 1.0)) > 1e-6:
        raise ParameterError("Z_tilde columns must be unit-normalized")
    return softmax_rows(x_proj @ z_tilde, tau_text)


def zero_shot_predict(x_img: np.ndarray, z_tilde: np.ndarray) -> np.ndarray:
    """Nearest text proxy by cosine similarity; ties go to the lowest index."""
    x_img = as_matrix(x_img, "X_img")
    z_tilde = as_matrix(z_tilde, "Z_tilde")
    norms = np.linalg.norm(x_img, axis=1, keepdims=True)
    x_img = np.where(norms > 1e-12, x_img / np.maximum(norms, 1e-300), x_img)
    return np.argmax(x_img @ z_tilde, axis=1)


def text_projection_loss(
    x: np.ndarray,
    head: ProjectionHead,
    z_tilde: np.ndarray,
    labels: np.ndarray,
    tau_text: float,
):
    """Cross entropy of projected features against the fixed text classifier.

    Returns (LossOutput with head gradients, gradient w.r.t. the head
    input) so callers can chain the input gradient into an adapter.
    """
    z_tilde = as_matrix(z_tilde, "Z_tilde")
    out, cache = head.forward(x, want_cache=True)
    logits = out @ z_tilde / tau_text
    value, dlogits, per_example = ce_loss(logits, labels)
    d_out = dlogits @ z_tilde.T / tau_text
    head_grads, d_x = head.backward(cache, d_out)
    lo = LossOutput(value=value, grads={HEAD: head.grads_flat(head_grads)}, per_example=per_example)
    return lo, d_x


# --- full objectives -------------------------------------------------------


def _finish_vision_grads(
    model: TesModel, x_raw: np.ndarray, x: np.ndarray, dlogits: np.ndarray,
    d_x_extra: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Assemble classifier/adapter gradients from a logits gradient."""
    grads = {CLASSIFIER: (x.T @ dlogits).ravel()}
    if model.adapter is not None:
        d_x = dlogits @ model.classifier.w.T
        if d_x_extra is not None:
            d_x = d_x + d_x_extra
        ag = model.adapter.backward(as_matrix(x_raw), d_x)
        grads[ADAPTER] = np.concatenate([ag["a"].ravel(), ag["b"]])
    return grads


def ce_objective(model: TesModel, x_raw: np.ndarray, labels: np.ndarray) -> LossOutput:
    """Plain cross entropy through adapter and classifier."""
    x = model.features(x_raw)
    value, dlogits, per_example = ce_loss(x @ model.classifier.w, labels)
    out = LossOutput(value=value, per_example=per_example)
    out.grads = _finish_vision_grads(model, x_raw, x, dlogits)
    return out


def ls_objective(
    model: TesModel,
    x_raw: np.ndarray,
    labels: np.ndarray,
    hp: Hyperparams,
    p_text_class: np.ndarray | None = None,
) -> LossOutput:
    """Label smoothing: uniform when p_text_class is None, text-guided otherwise."""
    x = model.features(x_raw)
    n_classes = model.classifier.n_classes
    mode = "uniform" if p_text_class is None else "text"
    targets = smoothed_targets(labels, n_classes, hp.ls_epsilon, mode, p_text_class)
    value, dlogits, per_example = soft_ce_loss(x @ model.classifier.w, targets)
    out = LossOutput(value=value, per_example=per_example)
    out.grads = _finish_vision_grads(model, x_raw, x, dlogits)
    return out


def tes_m_objective(
    model: TesModel,
    x_raw: np.ndarray,
    labels: np.ndarray,
    z: np.ndarray,
    reg_lambda: float,
) -> LossOutput:
    """Cross entropy plus proxy matching |h(W) - Z|_F^2 with a learned linear h."""
    if not isinstance(model.head, LinearAligner):
        raise ParameterError("tes_m requires a LinearAligner head on the model")
    z = as_matrix(z, "Z")
    x = model.features(x_raw)
    w = model.classifier.w
    value, dlogits, per_example = ce_loss(x @ w, labels)
    m = model.head.m
    if m.shape != (z.shape[0], w.shape[0]):
        raise ShapeError(f"aligner shape {m.shape} != ({z.shape[0]}, {w.shape[0]})")
    resid = m @ w - z
    value += reg_lambda * float(np.sum(resid * resid))
    out = LossOutput(value=value, per_example=per_example)
    out.grads = _finish_vision_grads(model, x_raw, x, dlogits)
    out.grads[CLASSIFIER] = out.grads[CLASSIFIER] + (2.0 * reg_lambda * (m.T @ resid)).ravel()
    out.grads[HEAD] = (2.0 * reg_lambda * (resid @ w.T)).ravel()
    return out


def _class_reg_and_grad(w: np.ndarray, p_text: np.ndarray, tau_vision: float):
    """Class-level cross entropy -sum P'_jk log P_jk and its W gradient."""
    norms = np.linalg.norm(w, axis=0)
    bad = np.nonzero(norms <= 1e-12)[0]
    if bad.size:
        raise DegenerateRowError(f"classifier proxy column {int(bad[0])} has near-zero norm")
    tilde = w / norms[None, :]
    sims = tilde.T @ tilde
    logp = log_softmax_rows(sims, tau_vision)
    reg = -float(np.sum(p_text * logp))
    # dR/dS = (P - P') / tau; S depends on both the row and column proxy.
    g_s = (np.exp(logp) - p_text) / tau_vision
    g_tilde = tilde @ (g_s + g_s.T)
    # Chain through the column normalization.
    inner = (tilde * g_tilde).sum(axis=0)
    d_w = (g_tilde - tilde * inner[None, :]) / norms[None, :]
    return reg, d_w


def tes_c_objective(
    model: TesModel,
    x_raw: np.ndarray,
    labels: np.ndarray,
    z: np.ndarray,
    hp: Hyperparams,
    p_text_class: np.ndarray | None = None,
) -> LossOutput:
    """Cross entropy plus class-level distribution transfer from text proxies.

    The text-side rows are fixed; pass p_text_class to reuse a cached copy
    (the text encoder never moves, so they are computed once per run).
    """
    x = model.features(x_raw)
    w = model.classifier.w
    if p_text_class is None:
        p_text_class = class_distributions(z, hp.tau_text)
    value, dlogits, per_example = ce_loss(x @ w, labels)
    reg, d_w_reg = _class_reg_and_grad(w, p_text_class, hp.tau_vision)
    out = LossOutput(value=value + hp.reg_lambda * reg, per_example=per_example)
    out.grads = _finish_vision_grads(model, x_raw, x, dlogits)
    out.grads[CLASSIFIER] = out.grads[CLASSIFIER] + hp.reg_lambda * d_w_reg.ravel()
    return out


def tes_objective(
    model: TesModel,
    x_raw: np.ndarray,
    labels: np.ndarray,
    z_tilde: np.ndarray,
    hp: Hyperparams,
    p_text_target: np.ndarray | None = None,
) -> LossOutput:
    """Full objective: (1-lv) CE + lv instance distillation + lt text projection.

    The per-example text distribution acts as a detached target inside the
    distillation term: its gradient path into the head is cut, so the head
    learns only through the text-projection loss.  Pass p_text_target to
    pin the target explicitly (the finite-difference checks do, since the
    detached path must not vary under parameter perturbations).
    """
    if not isinstance(model.head, ProjectionHead):
        raise ParameterError("tes requires a ProjectionHead on the model")
    z_tilde = as_matrix(z_tilde, "Z_tilde")
    x = model.features(x_raw)
    w = model.classifier.w
    labels = _check_labels(labels, w.shape[1])

    logits = x @ w
    logp = log_softmax_rows(logits)
    p = np.exp(logp)
    onehot = _onehot(labels, w.shape[1])
    n = labels.size

    out_proj, cache = model.head.forward(x, want_cache=True)
    if p_text_target is None:
        p_text = softmax_rows(out_proj @ z_tilde, hp.tau_text)  # detached target
    else:
        p_text = as_matrix(p_text_target, "p_text_target")

    ce_val = float(-(logp[np.arange(n), labels]).mean())
    distill_val = float(-(p_text * logp).sum(axis=1).mean())

    lt_logits = out_proj @ z_tilde / hp.tau_text
    lt_val, lt_dlogits, _ = ce_loss(lt_logits, labels)

    value = (1.0 - hp.lambda_v) * ce_val + hp.lambda_v * distill_val + hp.lambda_t * lt_val

    dlogits = ((1.0 - hp.lambda_v) * (p - onehot) + hp.lambda_v * (p - p_text)) / n
    d_out = hp.lambda_t * (lt_dlogits @ z_tilde.T) / hp.tau_text
    head_grads, d_x_head = model.head.backward(cache, d_out)

    extra = d_x_head if (hp.propagate_lt_to_adapter and model.adapter is not None) else None
    out = LossOutput(value=value)
    out.grads = _finish_vision_grads(model, x_raw, x, dlogits, d_x_extra=extra)
    out.grads[HEAD] = model.head.grads_flat(head_grads)
    return out


# --- dispatch used by the training loop ------------------------------------


@dataclass
class TextContext:
    """Per-run cache of text-proxy quantities.

    Built once before training: the text encoder is fixed, so proxies and
    every distribution derived from them never change during a run.
    """

    z: np.ndarray
    z_tilde: np.ndarray
    p_class: np.ndarray

    @classmethod
    def build(cls, z: np.ndarray, hp: Hyperparams) -> "TextContext":
        z = as_matrix(z, "Z")
        return cls(z=z, z_tilde=l2_normalize_cols(z), p_class=class_distributions(z, hp.tau_text))


def evaluate_objective(
    kind: str,
    model: TesModel,
    x_raw: np.ndarray,
    labels: np.ndarray,
    hp: Hyperparams,
    text: TextContext | None = None,
) -> LossOutput:
    """Evaluate one of the named objectives with gradients."""
    if kind not in LOSS_KINDS:
        raise ParameterError(f"unknown loss kind {kind!r}")
    if kind in PROXY_LOSSES and text is None:
        raise ParameterError(f"loss {kind} requires text proxies")
    if kind == "CE":
        return ce_objective(model, x_raw, labels)
    if kind == "LS":
        return ls_objective(model, x_raw, labels, hp)
    if kind == "TLS":
        return ls_objective(model, x_raw, labels, hp, p_text_class=text.p_class)
    if kind == "TES_M":
        return tes_m_objective(model, x_raw, labels, text.z, hp.reg_lambda)
    if kind == "TES_C":
        return tes_c_objective(model, x_raw, labels, text.z, hp, p_text_class=text.p_class)
    return tes_objective(model, x_raw, labels, text.z_tilde, hp)
