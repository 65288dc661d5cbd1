"""Real-encoder trend checks on CIFAR-10 with CLIP features.

These run only when the pretrained weights and the dataset are already
available locally (cached downloads); otherwise they skip.  The full
benchmark tables are out of reach at desk scale by design; the checks
here are the zero-shot floor and the few-shot text-supervision gain.
"""
import numpy as np
import pytest

from tes_extractor import ExtractionJob, extract_image_features, extract_text_proxies
from tes_extractor.encoders import EncoderUnavailable

import tesfit.data as tdata
from tesfit.losses import Hyperparams, zero_shot_predict
from tesfit.metrics import evaluate
from tesfit.ndcore import l2_normalize_cols
from tesfit.optim import TrainConfig, train
from tesfit.pipeline import initialize_model


@pytest.fixture(scope="module")
def clip_cifar(tmp_path_factory):
    root = tmp_path_factory.mktemp("clip_cifar")
    try:
        feat_job = ExtractionJob(dataset="cifar10-test", encoder="clip-vit-b32",
                                 output_prefix=str(root / "img"), batch_size=256)
        extract_image_features(feat_job)
        prox_job = ExtractionJob(dataset="", encoder="clip-vit-b32",
                                 output_prefix=str(root / "prox"))
        ds = tdata.read_features(root / "img")
        extract_text_proxies(prox_job, ds.class_names)
    except EncoderUnavailable as exc:
        pytest.skip(f"pretrained assets unavailable in this environment: {exc}")
    return ds, tdata.read_proxies(root / "prox")


def test_zero_shot_accuracy_floor(clip_cifar):
    ds, proxies = clip_cifar
    assert ds.n == 10000
    preds = zero_shot_predict(ds.features, l2_normalize_cols(proxies.z))
    top1 = evaluate(preds, ds.labels, ds.n_classes).top1
    assert top1 >= 0.80, f"zero-shot top1 {top1}"


def test_text_supervision_beats_ce_on_few_shot(clip_cifar):
    ds, proxies = clip_cifar
    gaps = []
    for seed in range(3):
        train_full, val = tdata.split(ds, 0.3, seed)
        few = tdata.few_shot_subsample(train_full, 0.1, 10, seed)
        accs = {}
        for kind in ("CE", "TES"):
            hp = Hyperparams(lambda_v=0.1, lambda_t=0.1, tau_text=0.03)
            config = TrainConfig(eta0_classifier=0.05, eta0_backbone=1e-3, eta0_head=0.01,
                                 epochs=100, batch_size=256, momentum=0.9, seed=seed,
                                 loss_kind=kind, hyperparams=hp)
            model = initialize_model(few, kind, seed=seed,
                                     d_z=proxies.z.shape[0] if kind == "TES" else None)
            _, trace = train(config, few, val, model,
                             proxies if kind == "TES" else None)
            accs[kind] = trace.epoch_val_top1[-1]
        gaps.append(accs["TES"] - accs["CE"])
    mean_gap = float(np.mean(gaps))
    assert mean_gap >= 0.002, f"text supervision gain {mean_gap:+.4f} below 0.2 points"
