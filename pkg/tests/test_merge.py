"""Surgery tests: copy independence, averaging oracles, mixture assembly
equivalences, exact parameter-count audits, split/blend algebra, freezing."""

import numpy as np
import pytest

from moemix import autodiff as ad
from moemix import merge as S
from moemix import model as M
from moemix.errors import SurgeryError
from moemix.moe import RouterConfig, moe_forward


def tiny_config(**kw):
    base = dict(d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)
    base.update(kw)
    return M.ModelConfig(**base)


def ff_param_count(cfg, per_model=True):
    return cfg.n_layers * 3 * cfg.d_model * cfg.d_ff


class TestBranch:
    def test_copies_bit_identical_then_independent(self):
        seed = M.init_seed(tiny_config(), 0)
        copies = S.branch(seed, 3)
        for c in copies:
            assert S.params_equal(c, seed)
        copies[0]["embed.weight"].data[0, 0] += 1.0
        assert not S.params_equal(copies[0], seed)
        assert S.params_equal(copies[1], seed)
        assert S.params_equal(copies[2], seed)

    def test_single_branch_equals_seed(self):
        seed = M.init_seed(tiny_config(), 1)
        assert S.params_equal(S.branch(seed, 1)[0], seed)

    def test_bad_count(self):
        with pytest.raises(SurgeryError):
            S.branch(M.init_seed(tiny_config(), 0), 0)


class TestAverage:
    def test_identical_average_is_identity(self):
        seed = M.init_seed(tiny_config(), 2)
        avg = S.average_params(S.branch(seed, 3))
        for k in seed:
            np.testing.assert_allclose(avg[k].data, seed[k].data, atol=1e-7)

    def test_two_point_mean(self):
        a = {"w": ad.Tensor(np.array([0.0]))}
        b = {"w": ad.Tensor(np.array([2.0]))}
        assert float(S.average_params([a, b])["w"].data[0]) == 1.0

    def test_matches_entrywise_oracle_in_64bit(self):
        with ad.precision(np.float64):
            models = [M.init_seed(tiny_config(), s) for s in range(5)]
            avg = S.average_params(models)
            for k in models[0]:
                oracle = sum(m[k].data for m in models) / 5
                np.testing.assert_allclose(avg[k].data, oracle, atol=1e-12)

    def test_non_ff_scope_leaves_ff_from_first(self):
        models = [M.init_seed(tiny_config(), s) for s in (3, 4)]
        avg = S.average_params(models, scope="non_ff")
        assert np.array_equal(avg["layers.0.ff.w1.weight"].data, models[0]["layers.0.ff.w1.weight"].data)
        expected = (models[0]["embed.weight"].data.astype(np.float64)
                    + models[1]["embed.weight"].data) / 2
        np.testing.assert_allclose(avg["embed.weight"].data, expected, atol=1e-7)

    def test_shape_mismatch_rejected(self):
        a = M.init_seed(tiny_config(), 0)
        b = M.init_seed(tiny_config(d_ff=32), 0)
        with pytest.raises(SurgeryError):
            S.average_params([a, b])


class TestMix:
    def test_bank_sizes_and_provenance(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 0)
        branches = S.branch(seed, 3)
        moe = S.mix_to_moe(
            branches, RouterConfig(), rng_seed=7, config=cfg,
            names=["math", "code", "wiki"], generalist=seed,
        )
        assert moe.n_experts == 4
        assert moe.provenance == ["math", "code", "wiki", "generalist"]
        for i in range(cfg.n_layers):
            assert moe.layer_params(i).n_experts == 4

    def test_identical_mix_forward_equals_seed(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 5)
        moe = S.mix_to_moe(S.branch(seed, 4), RouterConfig(method="topk", k=2), 11, cfg)
        toks = np.random.default_rng(0).integers(0, 256, size=(2, 10))
        dense_logits = M.forward(cfg, seed, toks).data
        moe_logits = moe.forward(toks).data
        np.testing.assert_allclose(moe_logits, dense_logits, atol=1e-5)

    def test_parameter_count_audit(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 6)
        branches = S.branch(seed, 3)
        moe = S.mix_to_moe(branches, RouterConfig(), 0, cfg, generalist=seed)
        n = 4
        ff_each = ff_param_count(cfg)
        non_ff = M.param_count(seed) - ff_each
        routers = cfg.n_layers * cfg.d_model * n
        assert moe.param_count() == n * ff_each + non_ff + routers

    def test_expert_order_is_input_order(self):
        cfg = tiny_config()
        branches = [M.init_seed(cfg, s) for s in (1, 2, 3)]
        moe = S.mix_to_moe(branches, RouterConfig(), 0, cfg)
        for e, src in enumerate(branches):
            got = moe.params[f"layers.0.moe.experts.{e}.w1.weight"].data
            assert np.array_equal(got, src["layers.0.ff.w1.weight"].data)

    def test_deterministic_given_seed(self):
        cfg = tiny_config()
        branches = [M.init_seed(cfg, s) for s in (1, 2)]
        a = S.mix_to_moe(branches, RouterConfig(), 42, cfg)
        b = S.mix_to_moe(branches, RouterConfig(), 42, cfg)
        assert S.params_equal(a.params, b.params)

    def test_generalist_average_toggle(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 7)
        other = M.init_seed(cfg, 8)
        with_gen = S.mix_to_moe([other, other], RouterConfig(), 0, cfg, generalist=seed)
        without = S.mix_to_moe(
            [other, other], RouterConfig(), 0, cfg, generalist=seed, generalist_in_average=False
        )
        assert not np.array_equal(with_gen.params["embed.weight"].data, without.params["embed.weight"].data)
        assert np.array_equal(without.params["embed.weight"].data, other["embed.weight"].data)


class TestUpcycle:
    def test_forward_equivalence_at_init(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 9)
        moe = S.upcycle(seed, 4, RouterConfig(method="topk", k=2), 3, cfg)
        toks = np.random.default_rng(1).integers(0, 256, size=(2, 12))
        np.testing.assert_allclose(
            moe.forward(toks).data, M.forward(cfg, seed, toks).data, atol=1e-5
        )

    def test_provenance_and_counts(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 10)
        moe = S.upcycle(seed, 4, RouterConfig(), 0, cfg)
        assert moe.provenance == ["seed"] * 4
        ff_each = ff_param_count(cfg)
        routers = cfg.n_layers * cfg.d_model * 4
        assert moe.param_count() == M.param_count(seed) + 3 * ff_each + routers

    def test_non_ff_verbatim(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 11)
        moe = S.upcycle(seed, 2, RouterConfig(), 0, cfg)
        assert np.array_equal(moe.params["embed.weight"].data, seed["embed.weight"].data)
        assert np.array_equal(
            moe.params["layers.1.attn.wq.weight"].data, seed["layers.1.attn.wq.weight"].data
        )


class TestSplit:
    def build_moe(self, cfg, seeds=(1, 2, 3)):
        return S.mix_to_moe([M.init_seed(cfg, s) for s in seeds], RouterConfig(), 0, cfg)

    def test_c1_keeps_experts_bitwise(self):
        cfg = tiny_config()
        moe = self.build_moe(cfg)
        split = S.split_experts(moe, 1, rng_seed=5)
        assert split.n_experts == moe.n_experts
        for k in moe.params:
            if ".moe.experts." in k:
                assert np.array_equal(split.params[k].data, moe.params[k].data), k

    def test_chunk_count_and_config(self):
        cfg = tiny_config()
        moe = self.build_moe(cfg)
        split = S.split_experts(moe, 2, rng_seed=5)
        assert split.n_experts == 6
        assert split.config.d_ff == cfg.d_ff // 2
        assert split.provenance == [
            f"expert{i}/chunk{j}" for i in range(3) for j in range(2)
        ]

    def test_ff_parameter_conservation_exact(self):
        cfg = tiny_config()
        moe = self.build_moe(cfg)
        for c in (1, 2, 4):
            split = S.split_experts(moe, c, rng_seed=0)
            before = sum(v.data.size for k, v in moe.params.items() if ".moe.experts." in k)
            after = sum(v.data.size for k, v in split.params.items() if ".moe.experts." in k)
            assert before == after

    def test_chunk_sum_reproduces_unsplit_expert(self):
        cfg = tiny_config()
        with ad.precision(np.float64):
            moe = self.build_moe(cfg)
            split = S.split_experts(moe, 2, rng_seed=1)
            rng = np.random.default_rng(2)
            x = ad.Tensor(rng.normal(size=(5, cfg.d_model)))
            for e in range(moe.n_experts):
                base = f"layers.0.moe.experts.{e}"
                whole = ad.matmul(
                    ad.mul(
                        ad.silu(ad.matmul(x, moe.params[f"{base}.w1.weight"])),
                        ad.matmul(x, moe.params[f"{base}.w3.weight"]),
                    ),
                    moe.params[f"{base}.w2.weight"],
                ).data
                parts = 0
                for j in range(2):
                    sb = f"layers.0.moe.experts.{2 * e + j}"
                    parts = parts + ad.matmul(
                        ad.mul(
                            ad.silu(ad.matmul(x, split.params[f"{sb}.w1.weight"])),
                            ad.matmul(x, split.params[f"{sb}.w3.weight"]),
                        ),
                        split.params[f"{sb}.w2.weight"],
                    ).data
                np.testing.assert_allclose(parts, whole, atol=1e-10)

    def test_indivisible_rejected(self):
        cfg = tiny_config()
        moe = self.build_moe(cfg)
        with pytest.raises(SurgeryError):
            S.split_experts(moe, 3, rng_seed=0)

    def test_active_width_arithmetic(self):
        # top-4 of 8 half-width chunks activates the same FF width as top-2 of 4
        cfg = tiny_config()
        moe = S.mix_to_moe([M.init_seed(cfg, s) for s in range(4)], RouterConfig(k=2), 0, cfg)
        split = S.split_experts(moe, 2, rng_seed=0)
        assert split.n_experts == 8
        assert 4 * split.config.d_ff == 2 * cfg.d_ff


class TestBlend:
    def test_identical_sources_keep_forward(self):
        cfg = tiny_config()
        seed = M.init_seed(cfg, 12)
        blended = S.blend_experts(S.branch(seed, 4), RouterConfig(method="topk", k=2), 0, cfg)
        toks = np.random.default_rng(3).integers(0, 256, size=(2, 8))
        np.testing.assert_allclose(
            blended.forward(toks).data, M.forward(cfg, seed, toks).data, atol=1e-5
        )

    def test_manual_concat_oracle(self):
        # chunk position j of blended expert n comes from domain (j+n) mod N
        cfg = tiny_config(d_model=4, d_ff=8, n_heads=2)
        experts = [M.init_seed(cfg, s) for s in (1, 2)]
        blended = S.blend_experts(experts, RouterConfig(k=1), 0, cfg)
        lo, hi = slice(0, 4), slice(4, 8)
        for n in range(2):
            w1 = np.concatenate(
                [
                    experts[n % 2]["layers.0.ff.w1.weight"].data[:, lo],
                    experts[(1 + n) % 2]["layers.0.ff.w1.weight"].data[:, hi],
                ],
                axis=1,
            )
            w2 = np.concatenate(
                [
                    experts[n % 2]["layers.0.ff.w2.weight"].data[lo, :],
                    experts[(1 + n) % 2]["layers.0.ff.w2.weight"].data[hi, :],
                ],
                axis=0,
            )
            got1 = blended.params[f"layers.0.moe.experts.{n}.w1.weight"].data
            got2 = blended.params[f"layers.0.moe.experts.{n}.w2.weight"].data
            assert np.array_equal(got1, w1)
            assert np.array_equal(got2, w2)

    def test_each_expert_draws_from_every_domain(self):
        cfg = tiny_config()
        experts = [M.init_seed(cfg, s) for s in range(4)]
        blended = S.blend_experts(experts, RouterConfig(), 0, cfg)
        w = cfg.d_ff // 4
        for n in range(4):
            got = blended.params[f"layers.1.moe.experts.{n}.w3.weight"].data
            sources = set()
            for j in range(4):
                cols = slice(j * w, (j + 1) * w)
                for d in range(4):
                    src = experts[d]["layers.1.ff.w3.weight"].data[:, cols]
                    if np.array_equal(got[:, cols], src):
                        sources.add(d)
            assert sources == {0, 1, 2, 3}

    def test_ff_totals_conserved(self):
        cfg = tiny_config()
        experts = [M.init_seed(cfg, s) for s in range(4)]
        blended = S.blend_experts(experts, RouterConfig(), 0, cfg)
        source_ff = sum(
            v.data.size for p in experts for k, v in p.items() if S.is_ff_name(k)
        )
        blended_ff = sum(
            v.data.size for k, v in blended.params.items() if ".moe.experts." in k
        )
        assert source_ff == blended_ff

    def test_indivisible_rejected(self):
        cfg = tiny_config(d_ff=15)
        experts = [M.init_seed(cfg, s) for s in range(2)]
        with pytest.raises(SurgeryError):
            S.blend_experts(experts, RouterConfig(), 0, cfg)


class TestFreezeMask:
    def build(self, freeze):
        cfg = tiny_config()
        moe = S.upcycle(M.init_seed(cfg, 0), 2, RouterConfig(), 0, cfg)
        return moe, S.build_freeze_mask(moe, freeze_ff=freeze)

    def test_default_all_trainable(self):
        moe, mask = self.build(False)
        assert all(mask.is_trainable(n) for n in moe.params)

    def test_freeze_ff_blocks_expert_banks_only(self):
        moe, mask = self.build(True)
        for name in moe.params:
            if ".moe.experts." in name:
                assert not mask.is_trainable(name), name
            else:
                assert mask.is_trainable(name), name

    def test_router_never_freezable(self):
        with pytest.raises(SurgeryError):
            S.FreezeMask({"layers.0.moe.router.weight": False})
