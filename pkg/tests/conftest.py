import numpy as np
import pytest

from croptryon.data_io import DEFAULT_PALETTE, PoseKeypoints, Sample, SegmentationMap
from croptryon.toy import make_toy_dataset, make_toy_sample


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return make_toy_dataset(root, n_train=8, n_test=8, H=64, W=48, seed=0)


@pytest.fixture
def toy_sample():
    return make_toy_sample("00001", 64, 48, rng=0)


def blank_sample(H=64, W=48, label=0, sample_id="s"):
    """A record whose parse is a single label everywhere."""
    rng = np.random.default_rng(1)
    return Sample(
        sample_id=sample_id,
        person_image=rng.integers(0, 256, (H, W, 3)) / 255.0,
        cloth_image=np.ones((H, W, 3)),
        cloth_mask=np.zeros((H, W)),
        parse=SegmentationMap(np.full((H, W), label), DEFAULT_PALETTE),
        keypoints=PoseKeypoints(np.zeros((18, 3))),
    )
