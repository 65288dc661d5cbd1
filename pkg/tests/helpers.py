"""Shared builders for random loss-test instances."""
import numpy as np

from tesfit.model import (
    FeatureAdapter,
    LinearAligner,
    ProjectionHead,
    TesModel,
    VisionClassifier,
)


def make_model(rng, d=5, c=3, d_z=4, head="none"):
    proj = ProjectionHead.init(d, d_z, rng)
    proj.b1 += 2.0  # keep ReLU units overwhelmingly active on random rows
    heads = {
        "none": None,
        "proj": proj,
        "aligner": LinearAligner(np.eye(d_z, d) + 0.1 * rng.normals((d_z, d))),
    }
    return TesModel(
        classifier=VisionClassifier(rng.normals((d, c))),
        adapter=FeatureAdapter(np.eye(d) + 0.1 * rng.normals((d, d)), 0.1 * rng.normals(d)),
        head=heads[head],
    )
