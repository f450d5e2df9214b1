import numpy as np
import pytest

from app.kitti_io import Label3D
from tests.helpers import dontcare, make_label


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="Rewrite the frozen snapshot digests under tests/data",
    )


@pytest.fixture
def update_golden(request: pytest.FixtureRequest) -> bool:
    return bool(request.config.getoption("--update-golden"))


@pytest.fixture
def rng() -> np.random.Generator:
    """Fixed-seed generator so every randomized test is reproducible."""
    return np.random.default_rng(20240601)


@pytest.fixture
def three_frame_labels() -> dict[str, list[Label3D]]:
    """
    Three frames covering every difficulty, a neighbor class and a DontCare region.
    """
    return {
        "000000": [
            make_label(bbox2d=(100.0, 150.0, 220.0, 200.0), location=(-4.0, 1.6, 15.0)),
            make_label(
                class_name="Pedestrian",
                bbox2d=(500.0, 140.0, 530.0, 200.0),
                dims3d=(1.75, 0.6, 0.9),
                location=(1.0, 1.7, 12.0),
            ),
            dontcare((900.0, 170.0, 1000.0, 190.0)),
        ],
        "000001": [
            make_label(
                occlusion=1,
                truncation=0.2,
                bbox2d=(300.0, 160.0, 360.0, 190.0),
                location=(3.0, 1.6, 30.0),
                rotation_y=0.5,
            ),
            make_label(class_name="Van", bbox2d=(700.0, 150.0, 800.0, 210.0), location=(8.0, 1.7, 20.0)),
            make_label(
                class_name="Cyclist",
                bbox2d=(620.0, 150.0, 660.0, 215.0),
                dims3d=(1.7, 0.6, 1.8),
                location=(-1.0, 1.6, 18.0),
                rotation_y=1.4,
            ),
        ],
        "000002": [
            make_label(
                occlusion=2,
                truncation=0.45,
                bbox2d=(40.0, 170.0, 120.0, 197.0),
                location=(-10.0, 1.6, 35.0),
                rotation_y=-0.3,
            ),
        ],
    }
