import numpy as np
import pytest

import exvid.tensor as T
from exvid import trainer
from exvid.diffusion import training_loss
from exvid.model import CapacityError, build_model, classify_params
from exvid.surgery import (
    ExtensionPlan,
    SurgeryError,
    extend_model,
    extend_positional_embedding,
    identity_adapter_weights,
    inject_identity_adapter,
    verify_identity,
)
from exvid.tensor import Tensor


@pytest.fixture
def plan():
    return ExtensionPlan(t_base=4, t_ext=20)


@pytest.fixture
def extended(tiny_model, plan):
    return extend_model(tiny_model, plan)


class TestExtensionPlan:
    def test_default_is_five_x(self):
        assert ExtensionPlan(t_base=8).t_ext == 40

    def test_target_must_exceed_base(self):
        with pytest.raises(SurgeryError):
            ExtensionPlan(t_base=8, t_ext=8)

    def test_even_adapter_kernel_rejected(self):
        with pytest.raises(SurgeryError, match="even"):
            ExtensionPlan(t_base=8, t_ext=16, adapter_kernel=(2, 1, 1))


class TestCyclicEmbedding:
    def test_row_13_is_row_5_for_base_8(self):
        rng = np.random.default_rng(0)
        pe = Tensor(rng.standard_normal((8, 6), dtype=np.float32))
        ext = extend_positional_embedding(pe, 32)
        assert ext.data[13].tobytes() == pe.data[5].tobytes()

    @pytest.mark.parametrize("t_ext", [16, 40])
    def test_every_row_tiles_modularly(self, t_ext):
        rng = np.random.default_rng(1)
        pe = Tensor(rng.standard_normal((8, 12), dtype=np.float32))
        ext = extend_positional_embedding(pe, t_ext)
        assert ext.shape == (t_ext, 12)
        assert ext.requires_grad
        for p in range(t_ext):
            assert ext.data[p].tobytes() == pe.data[p % 8].tobytes(), f"row {p}"

    def test_leading_rows_equal_original_block(self):
        rng = np.random.default_rng(2)
        pe = Tensor(rng.standard_normal((8, 4), dtype=np.float32))
        ext = extend_positional_embedding(pe, 40)
        assert ext.data[:8].tobytes() == pe.data.tobytes()

    def test_shrinking_rejected(self):
        pe = Tensor(np.zeros((8, 4), dtype=np.float32))
        with pytest.raises(SurgeryError):
            extend_positional_embedding(pe, 8)


class TestIdentityAdapter:
    def test_structure_c4_kernel_311(self):
        w, b = identity_adapter_weights(4, (3, 1, 1))
        assert w.shape == (4, 4, 3, 1, 1)
        assert np.count_nonzero(w) == 4
        assert set(np.unique(w)) == {0.0, 1.0}
        assert w.sum() == 4.0
        assert not b.any()

    def test_forward_is_bitwise_identity(self):
        rng = np.random.default_rng(3)
        w, b = identity_adapter_weights(5, (3, 1, 1))
        x = rng.standard_normal((5, 6, 4, 4), dtype=np.float32)
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b))
        assert out.data.tobytes() == x.tobytes()

    def test_even_kernel_rejected(self):
        with pytest.raises(SurgeryError, match="even"):
            identity_adapter_weights(4, (3, 2, 1))

    def test_inject_refuses_double_application(self, tiny_model):
        block = inject_identity_adapter(tiny_model.temporal[0])
        assert block.extended
        with pytest.raises(SurgeryError):
            inject_identity_adapter(block)


class TestExtendModel:
    def test_capacity_and_flag(self, extended):
        assert extended.frame_capacity == 20
        assert extended.extended

    def test_capacity_mismatch_rejected(self, tiny_model):
        with pytest.raises(CapacityError):
            extend_model(tiny_model, ExtensionPlan(t_base=8, t_ext=40))

    def test_repeat_surgery_rejected(self, extended, plan):
        with pytest.raises(SurgeryError):
            extend_model(extended, plan)

    def test_original_model_untouched(self, tiny_model, plan):
        before = {n: (t.data.tobytes(), t.requires_grad)
                  for n, t in tiny_model.named_tensors().items()}
        extend_model(tiny_model, plan)
        after = {n: (t.data.tobytes(), t.requires_grad)
                 for n, t in tiny_model.named_tensors().items()}
        assert before == after
        assert not tiny_model.extended

    def test_element_count_grows_by_formula(self, tiny_model, tiny_config, extended, plan):
        kernel_elems = int(np.prod(plan.adapter_kernel))
        expected = sum((plan.t_ext - plan.t_base) * c + c * c * kernel_elems + c
                       for c in tiny_config.channels)
        assert extended.element_count() - tiny_model.element_count() == expected

    def test_temporal_conv_bytes_survive(self, tiny_model, extended, tiny_config):
        for lvl in range(tiny_config.levels):
            a = tiny_model.temporal[lvl].conv_w.data
            b = extended.temporal[lvl].conv_w.data
            assert np.max(np.abs(a - b)) == 0.0
            assert a.tobytes() == b.tobytes()

    def test_spatial_bytes_survive(self, tiny_model, extended):
        spatial = classify_params(tiny_model)["spatial"]
        orig = tiny_model.named_tensors()
        ext = extended.named_tensors()
        for name in spatial:
            assert orig[name].data.tobytes() == ext[name].data.tobytes(), name

    def test_trainable_set_is_exactly_temporal(self, extended):
        temporal = classify_params(extended)["temporal"]
        trainable = {n for n, t in extended.named_parameters().items() if t.requires_grad}
        assert trainable == temporal

    def test_adapter_and_pe_classified_temporal(self, extended):
        temporal = classify_params(extended)["temporal"]
        assert any(n.endswith("adapter.weight") for n in temporal)
        assert any(n.endswith("positional_embedding") for n in temporal)

    def test_original_pe_snapshot_in_meta(self, tiny_model, extended, tiny_config):
        for lvl in range(tiny_config.levels):
            snap = extended.meta[f"pe_original/levels.{lvl}.temporal"]
            assert snap.tobytes() == tiny_model.temporal[lvl].positional_embedding.data.tobytes()

    def test_attention_can_stay_frozen(self, tiny_model):
        plan = ExtensionPlan(t_base=4, t_ext=8)
        plan.actions.make_attention_trainable = False
        ext = extend_model(tiny_model, plan)
        assert not ext.temporal[0].q_w.requires_grad
        assert ext.temporal[0].positional_embedding.requires_grad

    def test_adapter_can_be_skipped(self, tiny_model):
        plan = ExtensionPlan(t_base=4, t_ext=8)
        plan.actions.inject_identity_adapter = False
        ext = extend_model(tiny_model, plan)
        assert ext.temporal[0].adapter_w is None
        assert ext.frame_capacity == 8


class TestVerifyIdentity:
    @pytest.mark.parametrize("seed", range(5))
    def test_exactly_zero_at_init(self, tiny_model, extended, tiny_config, seed):
        rng = np.random.default_rng(seed)
        c = tiny_config
        sample = {
            "video": Tensor(rng.standard_normal(
                (1, c.base_frames, c.video_channels, c.height, c.width), dtype=np.float32)),
            "first_frame": Tensor(rng.standard_normal(
                (1, c.video_channels, c.height, c.width), dtype=np.float32)),
            "timestep": rng.integers(0, 1000, size=1),
        }
        assert verify_identity(tiny_model, extended, sample) == 0.0

    def test_repeated_calls_identical(self, tiny_model, extended, tiny_batch):
        a = verify_identity(tiny_model, extended, tiny_batch)
        b = verify_identity(tiny_model, extended, tiny_batch)
        assert a == b

    def test_one_training_step_breaks_identity(self, tiny_model, extended, tiny_batch):
        config = trainer.TrainConfig(max_steps=1, lr=1e-3, seed=0)
        state = trainer.init_state(extended, config)
        rng = trainer.step_rng(0, 0)
        batch = {
            "video": Tensor(np.random.default_rng(1).standard_normal(
                (1, 20, 3, 8, 8), dtype=np.float32)),
            "first_frame": tiny_batch["first_frame"],
        }
        trainer.train_step(extended, state, batch, config, rng)
        assert verify_identity(tiny_model, extended, tiny_batch) > 0.0
