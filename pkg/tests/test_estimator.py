import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dynfusion.estimator import DynamicFusion
from dynfusion.synthetic import default_scene, render_frame


@pytest.fixture(scope="module")
def stream():
    script = default_scene(frames=6, width=160, height=48)
    return script.intrinsics, [render_frame(script, t).packet for t in range(6)]


def test_params_and_clone():
    est = DynamicFusion(mode="static", object_voxel_size=0.02)
    params = est.get_params()
    assert params["mode"] == "static" and params["object_voxel_size"] == 0.02
    c = clone(est)
    assert c.get_params() == params and not hasattr(c, "map_")
    est.set_params(mode="dynamic")
    assert est.mode == "dynamic"


def test_fit_predict_score(stream):
    k, packets = stream
    est = DynamicFusion().fit(packets, intrinsics=k)
    assert est.n_frames_ == 6 and len(est.reports_) == 6
    depth = est.predict(packets[-2:])
    assert depth.shape == (2, 48, 160)
    ids = est.predict_ids([5])
    assert set(np.unique(ids)) <= {-2, -1, 0, 1}
    s = est.score(packets)
    assert -0.05 < s <= 0


def test_partial_fit_matches_fit(stream):
    k, packets = stream
    full = DynamicFusion().fit(packets, intrinsics=k)
    inc = DynamicFusion().fit(packets[:3], intrinsics=k)
    for p in packets[3:]:
        inc.partial_fit(p)
    assert full.map_.background.checksum() == inc.map_.background.checksum()


def test_validation(stream):
    k, packets = stream
    with pytest.raises(NotFittedError):
        DynamicFusion().predict([0])
    with pytest.raises(ValueError):
        DynamicFusion().fit(packets)
    est = DynamicFusion().fit(packets[:2], intrinsics=k)
    with pytest.raises(ValueError):
        est.partial_fit(packets[1])
    with pytest.raises(ValueError):
        DynamicFusion(mode="sideways").fit(packets, intrinsics=k)
