import json
from pathlib import Path

import numpy as np
import pytest
import torch

from maskadapt.backends import SegmenterRequest, white_page_segmenter
from maskadapt.generate import from_unit
from maskadapt.injection import pixel_mask_to_token_mask
from maskadapt.surrogate import build_surrogate_stack
from maskadapt.toydata import toy_entry_image
from maskadapt.trainer import TrainingSample

FIXTURES = Path(__file__).parent / "fixtures"


def toy_samples(stack, n=8, prompt="1girl, solo, standing", threshold=0.5):
    """n toy characters with white-page masks, ready for training."""
    spec = stack.vision.spec()
    seg = white_page_segmenter()
    out = []
    for i in range(n):
        img, skel = toy_entry_image(f"toy{i:04d}", size=stack.image_size)
        mask = seg.segment(SegmenterRequest(img, "character"))
        tm = pixel_mask_to_token_mask(mask, spec, threshold)
        out.append(TrainingSample(from_unit(img), prompt, tm, skel, f"toy{i:04d}"))
    return out


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def worked_record():
    return json.loads((FIXTURES / "worked_example_record.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def worked_expected():
    return json.loads((FIXTURES / "worked_example_expected.json").read_text(encoding="utf-8"))


@pytest.fixture
def stack():
    return build_surrogate_stack()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
