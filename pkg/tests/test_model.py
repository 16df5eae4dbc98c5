import dataclasses
import math

import numpy as np
import pytest

from exfusion.model import (
    AttentionLayer,
    Model,
    ModelSpec,
    collapse_to_dense,
    expected_param_count,
)
from exfusion.tensor import Tensor, cross_entropy, no_grad

from oracles import max_rel_err, numeric_gradient


def small_spec(**kw):
    base = dict(depth=2, dim=16, heads=4, expansion=2, vocab_size=11, num_classes=4,
                max_seq_len=8, seed=5)
    base.update(kw)
    return ModelSpec(**base)


def rand_tokens(spec, b=3, l=6, seed=0):
    return np.random.default_rng(seed).integers(0, spec.vocab_size, size=(b, l))


class TestSpecValidation:
    def test_dim_heads_divisibility(self):
        with pytest.raises(ValueError, match="heads"):
            small_spec(dim=10, heads=4)

    def test_expert_bounds(self):
        with pytest.raises(ValueError, match="num_experts"):
            small_spec(num_experts=0)
        with pytest.raises(ValueError, match="top_k"):
            small_spec(num_experts=2, top_k=3)

    def test_momentum_range(self):
        with pytest.raises(ValueError, match="momentum"):
            small_spec(momentum=1.0)

    def test_replaced_layers_range(self):
        with pytest.raises(ValueError, match="replaced_layers"):
            small_spec(replaced_layers=(0, 2))
        assert small_spec(replaced_layers=(1, 0, 1)).replaced_layers == (0, 1)
        assert small_spec(replaced_layers=None).resolved_replaced() == (0, 1)

    def test_roundtrip_dict(self):
        spec = small_spec(variant="mb", replaced_layers=(1,))
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestAttention:
    def test_single_token_output_is_projected_value(self):
        attn = AttentionLayer("a", 8, 2, "f32", 3)
        x_np = np.random.default_rng(1).normal(size=(2, 1, 8)).astype(np.float32)
        out = attn(Tensor(x_np)).data
        v = x_np @ attn.v.weight.data + attn.v.bias.data
        want = v @ attn.o.weight.data + attn.o.bias.data
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_identical_tokens_identical_outputs(self):
        attn = AttentionLayer("a", 8, 2, "f32", 4)
        row = np.random.default_rng(2).normal(size=8).astype(np.float32)
        x = Tensor(np.tile(row, (2, 5, 1)))
        out = attn(x).data
        for t in range(1, 5):
            np.testing.assert_allclose(out[:, t], out[:, 0], atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        attn = AttentionLayer("a", 16, 4, "f32", 5)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 7, 16)).astype(np.float32))
        _, probs = attn(x, return_weights=True)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)


class TestFFNSlot:
    def test_zero_params_zero_output(self):
        m = Model(small_spec())
        slot = m.blocks[0].ffn
        slot.up.weight.data = np.zeros_like(slot.up.weight.data)
        slot.down.weight.data = np.zeros_like(slot.down.weight.data)
        x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 16)).astype(np.float32))
        np.testing.assert_array_equal(slot.forward(x, False).data, 0.0)

    def test_identity_weights_pass_large_positive_input(self):
        spec = small_spec(expansion=1)
        m = Model(spec)
        slot = m.blocks[0].ffn
        eye = np.eye(16, dtype=np.float32)[None]
        slot.up.weight.data = eye.copy()
        slot.down.weight.data = eye.copy()
        slot.up.bias.data = np.zeros_like(slot.up.bias.data)
        slot.down.bias.data = np.zeros_like(slot.down.bias.data)
        x_np = np.full((1, 2, 16), 9.0, dtype=np.float32)
        out = slot.forward(Tensor(x_np), False).data
        np.testing.assert_allclose(out, x_np, atol=1e-5)

    def test_gradcheck_dense_slot_params(self):
        m = Model(small_spec(), dtype="f32")
        slot = m.blocks[0].ffn
        x_np = np.random.default_rng(5).normal(size=(4, 16)).astype(np.float32) * 0.5
        slot.forward(Tensor(x_np[None]), False).sum().backward()
        params = [slot.up.weight, slot.up.bias, slot.down.weight, slot.down.bias]
        arrays = [p.data.astype(np.float64) for p in params]

        def f(uw, ub, dw, db):
            m64 = Model(small_spec(), dtype="f64")
            s = m64.blocks[0].ffn
            s.up.weight.data, s.up.bias.data = uw, ub
            s.down.weight.data, s.down.bias.data = dw, db
            return float(s.forward(Tensor(x_np.astype(np.float64)[None]), False).sum().data)

        for i, p in enumerate(params):
            num = numeric_gradient(f, arrays, i, 1e-3)
            assert max_rel_err(p.grad, num) < 1e-4, f"ffn param {i}"


class TestBlocks:
    def test_zeroed_block_is_identity(self):
        m = Model(small_spec())
        block = m.blocks[0]
        for _, t in block.named_parameters():
            t.data = np.zeros_like(t.data)
        x_np = np.random.default_rng(6).normal(size=(2, 4, 16)).astype(np.float32)
        out = block.forward(Tensor(x_np), None, False).data
        np.testing.assert_array_equal(out, x_np)

    def test_dense_equals_single_expert_static(self):
        dense = Model(small_spec(variant="dense"))
        sw1 = Model(small_spec(variant="sw", num_experts=1))
        tokens = rand_tokens(dense.spec)
        a = dense.forward(tokens).data
        b = sw1.forward(tokens).data
        assert a.tobytes() == b.tobytes()

    def test_no_replaced_layers_matches_dense_bitwise(self):
        tokens = rand_tokens(small_spec())
        dense = Model(small_spec(variant="dense")).forward(tokens).data
        for variant in ("sw", "dw", "mb", "moe"):
            m = Model(small_spec(variant=variant, replaced_layers=()))
            assert m.forward(tokens).data.tobytes() == dense.tobytes(), variant


class TestModelForward:
    def test_classification_logits_shape(self):
        m = Model(small_spec())
        assert m.forward(rand_tokens(m.spec)).shape == (3, 4)

    def test_lm_logits_shape(self):
        m = Model(small_spec(objective="lm"))
        assert m.forward(rand_tokens(m.spec)).shape == (3, 6, 11)

    def test_forward_deterministic(self):
        m = Model(small_spec(variant="mb"))
        tokens = rand_tokens(m.spec)
        assert m.forward(tokens).data.tobytes() == m.forward(tokens).data.tobytes()

    def test_init_loss_near_uniform(self):
        spec = small_spec(num_classes=8)
        m = Model(spec)
        rng = np.random.default_rng(7)
        tokens = rng.integers(0, spec.vocab_size, size=(64, 6))
        labels = rng.integers(0, 8, size=64)
        loss = cross_entropy(m.forward(tokens), labels).item()
        assert abs(loss - math.log(8)) < 0.1 * math.log(8)

    def test_causal_logits_ignore_future_tokens(self):
        m = Model(small_spec(objective="lm"))
        rng = np.random.default_rng(8)
        tokens = rng.integers(0, 11, size=(2, 6))
        changed = tokens.copy()
        changed[:, 4:] = (changed[:, 4:] + 3) % 11
        a = m.forward(tokens).data
        b = m.forward(changed).data
        assert a[:, :4].tobytes() == b[:, :4].tobytes()
        assert not np.array_equal(a[:, 4:], b[:, 4:])

    def test_rejects_long_sequence_and_bad_tokens(self):
        m = Model(small_spec())
        with pytest.raises(Exception, match="max_seq_len"):
            m.forward(np.zeros((1, 9), dtype=int))
        with pytest.raises(ValueError, match="token id"):
            m.forward(np.full((1, 4), 11))


class TestParamAudit:
    @pytest.mark.parametrize("variant", ["dense", "sw", "dw", "mb", "moe"])
    def test_count_matches_closed_form(self, variant):
        for kw in (dict(), dict(replaced_layers=(1,)), dict(shared_router=False),
                   dict(num_experts=3, top_k=2), dict(objective="lm")):
            spec = small_spec(variant=variant, **kw)
            assert Model(spec).param_count() == expected_param_count(spec), (variant, kw)

    def test_frozen_learned_weights_still_counted(self):
        spec = small_spec(variant="dw", freeze_fusion_weights=True)
        assert Model(spec).param_count() == expected_param_count(spec)


class TestFullModelGradients:
    @pytest.mark.parametrize("variant", ["sw", "dw", "mb"])
    def test_small_model_grads_match_fd(self, variant):
        spec = ModelSpec(depth=2, dim=8, heads=2, expansion=2, vocab_size=7,
                         num_classes=3, max_seq_len=4, variant=variant,
                         num_experts=3, seed=11)
        model = Model(spec, dtype="f32")
        rng = np.random.default_rng(12)
        tokens = rng.integers(0, 7, size=(2, 4))
        labels = rng.integers(0, 3, size=2)

        banks = model.bank_state()
        loss = cross_entropy(model.forward(tokens, training=True), labels)
        loss.backward()
        model.set_bank_state(banks)

        m64 = model.cast("f64")
        names = [n for n, _ in m64.named_parameters()]
        params64 = dict(m64.named_parameters())
        banks64 = {k: v.astype(np.float64) for k, v in banks.items()}

        def f64_loss():
            m64.set_bank_state(banks64)
            with no_grad():
                return float(cross_entropy(m64.forward(tokens, training=True), labels).data)

        worst = 0.0
        h = 1e-4  # balances truncation vs roundoff at this parameter scale
        for name, t in model.named_parameters():
            target = params64[name].data
            num = np.zeros_like(target)
            flat, nflat = target.reshape(-1), num.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                hi = f64_loss()
                flat[j] = orig - h
                lo = f64_loss()
                flat[j] = orig
                nflat[j] = (hi - lo) / (2 * h)
            assert t.grad is not None, name
            worst = max(worst, max_rel_err(t.grad, num))
        assert worst < 1e-4, f"{variant}: max rel err {worst:.2e}"
        assert names == [n for n, _ in model.named_parameters()]


class TestCollapse:
    def _trained_ish(self, variant, seed=13, **kw):
        spec = small_spec(variant=variant, seed=seed, **kw)
        model = Model(spec)
        rng = np.random.default_rng(seed)
        # nudge every parameter and run a few training forwards so banks move
        for _, t in model.named_parameters():
            t.data = t.data + rng.normal(0, 0.01, t.data.shape).astype(t.data.dtype)
        for _ in range(5):
            tokens = rng.integers(0, spec.vocab_size, size=(2, 5))
            model.forward(tokens, training=True)
        return model

    @pytest.mark.parametrize("variant", ["sw", "dw", "mb"])
    def test_eval_logits_match_on_fresh_batches(self, variant):
        model = self._trained_ish(variant)
        dense = collapse_to_dense(model)
        rng = np.random.default_rng(14)
        worst = 0.0
        for _ in range(16):
            tokens = rng.integers(0, model.spec.vocab_size, size=(4, 6))
            with no_grad():
                a = model.forward(tokens, training=False).data
                b = dense.forward(tokens, training=False).data
            worst = max(worst, float(np.abs(a - b).max()))
        assert worst < 1e-5

    def test_mb_unshared_router_collapse(self):
        model = self._trained_ish("mb", shared_router=False)
        dense = collapse_to_dense(model)
        tokens = rand_tokens(model.spec, seed=15)
        with no_grad():
            a = model.forward(tokens).data
            b = dense.forward(tokens).data
        assert np.abs(a - b).max() < 1e-5

    def test_collapsed_count_equals_dense_baseline(self):
        for variant in ("sw", "dw", "mb"):
            model = self._trained_ish(variant)
            dense_spec = dataclasses.replace(model.spec, variant="dense")
            assert collapse_to_dense(model).param_count() == expected_param_count(dense_spec)

    def test_sw_collapse_is_expert_mean(self):
        model = self._trained_ish("sw")
        dense = collapse_to_dense(model)
        src = model.blocks[0].ffn.up.weight.data
        got = dense.blocks[0].ffn.up.weight.data[0]
        np.testing.assert_allclose(got, src.mean(axis=0), atol=1e-7)

    def test_moe_not_collapsible(self):
        model = Model(small_spec(variant="moe"))
        with pytest.raises(ValueError, match="collapsed"):
            collapse_to_dense(model)
