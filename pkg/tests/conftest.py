"""
共享测试夹具：float64 精度、极小模型配置与临时生成的程序化数据集。
"""

import numpy as np
import pytest

from sceneslots_core.camera import CameraView, ring_pose
from sceneslots_core.config_manager import ConfigManager
from sceneslots_core.scenegen import generate_dataset, load_dataset, write_dataset
from sceneslots_core.tensor import current_tape, precision

TINY_CONFIG = """
[Logging]
level = WARNING
log_file = sceneslots.log

[Runtime]
seed = 0
threads = 1
precision = float64
chunk_size = 4096

[Model]
num_slots = 2
slot_dim = 4
encoder_channels = 3
encoder_variant = compact
encoder_resolution = 8
attention_iters = 1
mlp_hidden = 4
decoder_width = 8
fg_layers = 3
bg_layers = 2
skip_layer = 1
num_frequencies = 2
scene_scale = 0.25
extractor_channels = 2,2,2
disc_channels = 2,2,2,2

[Train]
coarse_steps = 2
fine_steps = 1
coarse_resolution = 8
full_resolution = 16
patch_size = 8
coarse_samples = 4
fine_samples = 4
num_views = 2
jitter = true
lr = 0.001
checkpoint_every = 0
snapshot_every = 0

[SceneGen]
num_scenes = 2
num_views = 2
resolution = 16
render_samples = 16
min_objects = 1
max_objects = 2
object_sizes = 0.3

[Eval]
seeds = 0
samples = 8
"""


# =============================================================================
# 精度与磁带
# =============================================================================

@pytest.fixture
def float64():
    """梯度相关的测试在 float64 下运行。"""
    with precision("float64"):
        yield
    current_tape().clear()


@pytest.fixture(autouse=True)
def clean_tape():
    """每个测试结束后清空当前线程的磁带。"""
    yield
    current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# =============================================================================
# 配置与数据集
# =============================================================================

@pytest.fixture
def tiny_config_text() -> str:
    return TINY_CONFIG


@pytest.fixture
def tiny_config() -> ConfigManager:
    return ConfigManager.from_text(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """2 个场景、每个 2 个视角、16x16 的程序化数据集（整个会话只生成一次）。"""
    config = ConfigManager.from_text(TINY_CONFIG)
    root = tmp_path_factory.mktemp("dataset")
    with precision("float64"):
        records = generate_dataset(config.scenegen, seed=0)
    write_dataset(records, root, digest=config.dataset_digest(), seed=0)
    return root


@pytest.fixture
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture
def small_view() -> CameraView:
    """看向原点的 8x8 相机。"""
    return CameraView(focal=8.0, cx=4.0, cy=4.0, width=8, height=8,
                      cam_to_world=ring_pose(3.0, 0.5, 0.3), near=1.0, far=5.0)
