import numpy as np
import pytest

from coopbev.config import (
    AblateConfig,
    EvalConfig,
    ExperimentConfig,
    GridConfig,
    ModelConfig,
    TrainConfig,
)
from coopbev.scene import SceneConfig


def tiny_scene_config() -> SceneConfig:
    return SceneConfig(n_objects=(2, 3), x_range=(-12.0, 12.0), y_range=(-6.0, 6.0),
                       radius_range=(4.0, 10.0), sender_distance=(3.0, 6.0),
                       min_hidden_objects=0, min_ego_visible=1, n_rays=180)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    cfg = ExperimentConfig(
        master_seed=7,
        grid=GridConfig(h=32, w=16, resolution=1.0),
        scene=tiny_scene_config(),
        eval_scene=tiny_scene_config(),
        model=ModelConfig(extractor_channels=(8, 16), extractor_strides=(1, 2),
                          dtype="float32"),
        train=TrainConfig(n_scenes=3, epochs=1),
        eval=EvalConfig(n_scenes=3),
        ablate=AblateConfig(n_scenes=2, epochs=1, n_eval_scenes=2),
    )
    cfg.validate()
    return cfg
