"""High-level run orchestration shared by the CLI, estimator, and tests.

Wires dataset -> probe-initialized model -> training -> verification so
the pieces compose without every caller repeating the plumbing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureDataset, TextProxySet, synth_generate
from .errors import ParameterError
from .losses import (
    Hyperparams,
    LossOutput,
    TextContext,
    evaluate_objective,
    instance_text_distribution,
    tes_objective,
    text_projection_loss,
)
from .model import (
    ADAPTER,
    CLASSIFIER,
    FeatureAdapter,
    LinearAligner,
    ProjectionHead,
    TesModel,
    VisionClassifier,
    parameter_distance,
)
from .ndcore import GradCheckReport, compare_gradients, finite_diff_gradient
from .optim import TrainConfig, TrainingTrace, train
from .rng import CHECK_STREAM, INIT_STREAM, SplitMix64
from .theory import (
    BoundReport,
    estimate_constants,
    probe_objective,
    solve_linear_probe,
    verify_corollary1,
    verify_prop1,
    verify_theorem1,
    verify_theorem2,
)


def initialize_model(
    train_ds: FeatureDataset,
    loss_kind: str,
    seed: int,
    d_z: int | None = None,
    hidden: int | None = None,
    use_adapter: bool = True,
    classifier_init: str = "probe",
    head_init: str = "identity",
    probe_mu: float = 1e-2,
    probe_tol: float = 1e-8,
) -> TesModel:
    """Build the model a loss kind needs, classifier at the probe solution.

    classifier_init "probe" solves the regularized linear probe on the
    training features; "gaussian" draws std-0.01 entries instead.
    head_init "identity" starts the projection as a pass-through map (the
    pretrained-alignment convention); "gaussian" draws a random head and
    needs hidden width == feature dim only by default.
    """
    d = train_ds.dim
    c = train_ds.n_classes
    rng = SplitMix64.stream(seed, INIT_STREAM)
    if classifier_init == "probe":
        clf = solve_linear_probe(train_ds.features, train_ds.labels, probe_mu,
                                 tol=probe_tol, n_classes=c)
    elif classifier_init == "gaussian":
        clf = VisionClassifier.gaussian(d, c, rng)
    else:
        raise ParameterError(f"unknown classifier init {classifier_init!r}")
    adapter = FeatureAdapter.identity(d) if use_adapter else None
    head: ProjectionHead | LinearAligner | None = None
    if loss_kind == "TES":
        if d_z is None:
            raise ParameterError("TES needs the text dimension d_z")
        if head_init == "identity" and hidden is None:
            head = ProjectionHead.identity(d, d_z)
        elif head_init in ("identity", "gaussian"):
            head = ProjectionHead.init(d, d_z, rng, hidden=hidden)
        else:
            raise ParameterError(f"unknown head init {head_init!r}")
    elif loss_kind == "TES_M":
        if d_z is None:
            raise ParameterError("TES_M needs the text dimension d_z")
        head = LinearAligner.identity(d, d_z)
    return TesModel(classifier=clf, adapter=adapter, head=head)


# --- verification runs ------------------------------------------------------


@dataclass
class VerificationArtifacts:
    """Everything a displacement-bound run produced."""

    reports: list[BoundReport]
    trace: TrainingTrace
    w0: np.ndarray
    wt: np.ndarray
    constants: dict[str, float] = field(default_factory=dict)


def displacement_run(
    seed: int = 0,
    eta0_backbone: float = 1e-3,
    eta0_classifier: float = 5e-2,
    mu: float = 1e-2,
    epochs: int = 30,
    batch_size: int | None = None,
    n_classes: int = 3,
    dim: int = 8,
    n_per_class: int = 100,
    margin: float = 3.0,
    samples: int = 64,
    ds: FeatureDataset | None = None,
) -> VerificationArtifacts:
    """Momentum-free fine-tuning run instrumented for the bound verifiers.

    Trains CE plus an explicit mu*|W|^2 term (weight decay 2*mu on the
    classifier group only) from the probe solution, so the optimized
    objective is exactly the strongly convex one the constants refer to.
    Full-batch by default: the probe point is then a true stationary point
    of the classifier subproblem and the classifier moves only because the
    backbone does.
    """
    if ds is None:
        ds, _ = synth_generate(seed, n_classes, dim, n_per_class, margin)
    if batch_size is None:
        batch_size = ds.n
    probe = solve_linear_probe(ds.features, ds.labels, mu, n_classes=ds.n_classes)
    w0 = probe.w.copy()
    model = TesModel(
        classifier=VisionClassifier(w0.copy()),
        adapter=FeatureAdapter.identity(ds.dim),
    )
    config = TrainConfig(
        eta0_classifier=eta0_classifier,
        eta0_backbone=eta0_backbone,
        eta0_head=eta0_classifier,
        epochs=epochs,
        batch_size=batch_size,
        momentum=0.0,
        weight_decay=2.0 * mu,
        weight_decay_groups=(CLASSIFIER,),
        seed=seed,
        loss_kind="CE",
    )
    model, trace = train(config, ds, None, model)
    wt = model.classifier.w.copy()

    m, lips, delta = estimate_constants(ds.features, ds.labels, mu, trace, samples=samples,
                                        seed=seed)
    epsilon = parameter_distance(trace.initial, trace.final, ADAPTER)

    probe_value, _ = probe_objective(ds.features, ds.labels, w0, mu)
    final_value, _ = probe_objective(model.features(ds.features), ds.labels, wt, mu)
    precondition_ok = bool(final_value <= probe_value)

    thm1 = verify_theorem1(w0, wt, m, lips, epsilon, precondition_ok=precondition_ok)
    prop1 = verify_prop1(trace)
    cor1 = verify_corollary1(thm1, prop1)
    return VerificationArtifacts(
        reports=[thm1, prop1, cor1],
        trace=trace,
        w0=w0,
        wt=wt,
        constants={
            "m": m,
            "L": lips,
            "delta": delta,
            "epsilon": epsilon,
            "probe_loss": probe_value,
            "final_loss": final_value,
        },
    )


def theorem2_random_draws(
    draws: int = 1000, n: int = 16, dim: int = 8, n_classes: int = 5, seed: int = 0
) -> BoundReport:
    """Aggregate sandwich check over random (X, W) instances."""
    rng = SplitMix64.stream(seed, CHECK_STREAM + 2)
    worst: BoundReport | None = None
    for _ in range(draws):
        x = rng.normals((n, dim))
        w = rng.normals((dim, n_classes))
        labels = np.array([rng.below(n_classes) for _ in range(n)], dtype=np.int64)
        report = verify_theorem2(x, VisionClassifier(w), labels)
        if worst is None or report.lhs > worst.lhs:
            worst = report
    worst.constants["draws"] = float(draws)
    worst.notes = f"worst over {draws} random draws; " + worst.notes
    return worst


# --- gradient-check sweep ----------------------------------------------------


def _random_problem(rng: SplitMix64, kind: str):
    """Small random instance exercising every gradient path of a loss.

    Instances whose ReLU pre-activations sit within 1e-3 of a kink are
    redrawn: a finite-difference step of 1e-5 must not cross one.
    """
    n, d_raw, d, d_z, c = 6, 5, 5, 4, 3
    for _ in range(64):
        x_raw = rng.normals((n, d_raw))
        labels = np.array([rng.below(c) for _ in range(n)], dtype=np.int64)
        adapter = FeatureAdapter(
            np.eye(d_raw, d) + 0.1 * rng.normals((d_raw, d)), 0.1 * rng.normals(d)
        )
        clf = VisionClassifier(rng.normals((d, c)))
        head: ProjectionHead | LinearAligner | None = None
        if kind in ("TES", "LT"):
            head = ProjectionHead.init(d, d_z, rng)
            head.b1 = 0.05 * rng.normals(head.b1.size)
            head.b2 = 0.1 * rng.normals(head.b2.size)
            pre = adapter.forward(x_raw) @ head.l1 + head.b1
            if np.min(np.abs(pre)) <= 1e-3:
                continue
        elif kind == "TES_M":
            head = LinearAligner(np.eye(d_z, d) + 0.1 * rng.normals((d_z, d)))
        z = rng.normals((d_z, c))
        z = z / np.linalg.norm(z, axis=0, keepdims=True)
        return TesModel(classifier=clf, adapter=adapter, head=head), x_raw, labels, z
    raise RuntimeError("could not draw a kink-free instance")


def _loss_for_kind(
    kind: str, model: TesModel, x_raw, labels, z, hp: Hyperparams, tes_target=None
) -> LossOutput:
    if kind == "LT":
        x = model.features(x_raw)
        out, d_x = text_projection_loss(x, model.head, z, labels, hp.tau_text)
        ag = model.adapter.backward(np.asarray(x_raw, dtype=np.float64), d_x)
        out.grads[ADAPTER] = np.concatenate([ag["a"].ravel(), ag["b"]])
        return out
    if kind == "TES":
        # z is already column-normalized here; pin the detached target so
        # finite differences probe the same function the gradient is for.
        return tes_objective(model, x_raw, labels, z, hp, p_text_target=tes_target)
    text = TextContext.build(z, hp) if kind in ("TLS", "TES_M", "TES_C") else None
    return evaluate_objective(kind, model, x_raw, labels, hp, text)


GRADCHECK_KINDS = ("CE", "LS", "TLS", "TES_M", "TES_C", "TES", "LT")


def gradcheck_suite(
    points: int = 20,
    seed: int = 7,
    h: float = 1e-5,
    kinds=GRADCHECK_KINDS,
    corrupt=None,
    aggregate: bool = True,
):
    """Finite-difference audit of every loss at random parameter points.

    With aggregate=True returns one (kind, point, GradCheckReport) row per
    random point, worst error across parameter groups; otherwise rows are
    (kind, point, group, report).  corrupt is a test hook
    (kind, group, grad) -> grad that lets the suite prove it detects a
    broken gradient.
    """
    hp = Hyperparams(lambda_v=0.35, lambda_t=0.8, tau_text=0.2, tau_vision=0.7,
                     reg_lambda=0.6, ls_epsilon=0.15)
    detail: list[tuple[str, int, str, GradCheckReport]] = []
    rng = SplitMix64.stream(seed, CHECK_STREAM + 3)
    for kind in kinds:
        for point in range(points):
            model, x_raw, labels, z = _random_problem(rng, kind)
            tes_target = None
            if kind == "TES":
                proj = model.head.forward(model.features(x_raw))
                tes_target = instance_text_distribution(proj, z, hp.tau_text)
            out = _loss_for_kind(kind, model, x_raw, labels, z, hp, tes_target)
            for group in model.groups():
                if group not in out.grads:
                    continue
                base = model.get_flat(group)

                def value_at(vec, _group=group, _model=model):
                    trial = _model.copy()
                    trial.set_flat(_group, vec)
                    return _loss_for_kind(kind, trial, x_raw, labels, z, hp, tes_target).value

                analytic = out.grads[group]
                if corrupt is not None:
                    analytic = corrupt(kind, group, analytic)
                numeric = finite_diff_gradient(value_at, base, h)
                detail.append((kind, point, group, compare_gradients(analytic, numeric)))
    if not aggregate:
        return detail
    rows: list[tuple[str, int, GradCheckReport]] = []
    for kind in kinds:
        for point in range(points):
            reports = [r for k, p, _, r in detail if k == kind and p == point]
            rows.append((
                kind,
                point,
                GradCheckReport(
                    max_abs_error=max(r.max_abs_error for r in reports),
                    max_rel_error=max(r.max_rel_error for r in reports),
                    analytic_norm=float(np.sqrt(sum(r.analytic_norm**2 for r in reports))),
                    numeric_norm=float(np.sqrt(sum(r.numeric_norm**2 for r in reports))),
                ),
            ))
    return rows


def run_elapsed(fn, *args, **kwargs):
    """(result, seconds) convenience used by budgeted acceptance checks."""
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start
