import itertools

import numpy as np
import pytest

from hilots import tensor as T
from hilots.geom import CylGridConfig, PointCloudFrame, voxelize_frame
from hilots.gradcheck import run_case, tiny_heu_config
from hilots.heu import (Grouping, HeuConfig, ScatterRecipe, attention, farthest_point_sample, heu_forward,
                        htsf_layer, init_heu_params, ltsf_layer, make_grouping, mva_spatial, mva_temporal,
                        nn_group, plan_heu, scatter_to_grid)
from hilots.tensor import ParameterSet, Tensor

D = 4
TINY_GRID = CylGridConfig(rho_range=(0.0, 10.0), z_range=(-2.0, 2.0), resolution=(8, 8, 4))


# -- numpy oracles, written directly from the formulas ---------------------------------------

def np_softmax(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_attention(q_in, kv_in, wq, wk, wv):
    q, k, v = q_in @ wq, kv_in @ wk, kv_in @ wv
    return np_softmax(q @ k.T / np.sqrt(q.shape[1])) @ v


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_mlp(x, layers):
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def p_np(params, name):
    return params[name].data


def np_mlp_params(params, prefix):
    return [(w.data, b.data) for w, b in params.mlp(prefix)]


def np_htsf(V, params, i):
    p = f"heu/htsf/layer{i}"
    x = np_ln(V + np_attention(V, V, *(p_np(params, f"{p}/{n}") for n in ("wq", "wk", "wv"))),
              p_np(params, f"{p}/ln1/g"), p_np(params, f"{p}/ln1/b"))
    return np_ln(x + np_mlp(x, np_mlp_params(params, f"{p}/mlp")), p_np(params, f"{p}/ln2/g"),
                 p_np(params, f"{p}/ln2/b"))


def np_ltsf(U, H, params, i):
    p = f"heu/ltsf/layer{i}"
    x = np_ln(U + np_attention(U, U, *(p_np(params, f"{p}/{n}") for n in ("wq", "wk", "wv"))),
              p_np(params, f"{p}/ln1/g"), p_np(params, f"{p}/ln1/b"))
    if H is not None:
        c = np_attention(x, H, *(p_np(params, f"{p}/{n}") for n in ("cq", "ck", "cv")))
        x = np_ln(x + c, p_np(params, f"{p}/ln3/g"), p_np(params, f"{p}/ln3/b"))
    return np_ln(x + np_mlp(x, np_mlp_params(params, f"{p}/mlp")), p_np(params, f"{p}/ln2/g"),
                 p_np(params, f"{p}/ln2/b"))


def heu_params(cfg, seed=0, jitter=0.3):
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    init_heu_params(params, cfg, rng)
    for _, t in params.items():
        t.data = t.data + rng.normal(0.0, jitter, t.data.shape)
    return params


# -- grouping -------------------------------------------------------------------------------

class TestGrouping:
    def test_square_corners_pick_diagonal(self):
        xyz = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
        centers, assign = nn_group(xyz, 2)
        np.testing.assert_array_equal(centers, [0, 2])
        d = np.linalg.norm(xyz[:, None] - xyz[centers][None], axis=-1)
        # brute force: nearest centre, ties to the lower centre slot
        expected = [min(range(2), key=lambda g: (d[i, g], g)) for i in range(4)]
        np.testing.assert_array_equal(assign, expected)

    def test_fps_is_deterministic_and_spread(self, rng):
        xyz = rng.normal(size=(50, 3))
        a = farthest_point_sample(xyz, 10)
        np.testing.assert_array_equal(a, farthest_point_sample(xyz, 10))
        assert a[0] == 0 and len(set(a.tolist())) == 10

    def test_fps_matches_brute_force(self, rng):
        xyz = rng.normal(size=(30, 3))
        chosen = [0]
        for _ in range(7):
            dmin = [min(np.sum((xyz[i] - xyz[c]) ** 2) for c in chosen) for i in range(30)]
            chosen.append(int(np.argmax(dmin)))
        np.testing.assert_array_equal(farthest_point_sample(xyz, 8), chosen)

    def test_members_partition_input(self, rng):
        xyz = rng.normal(size=(40, 3))
        g = make_grouping(xyz, np.arange(100, 140), 6)
        members = np.concatenate(g.members())
        np.testing.assert_array_equal(np.sort(members), np.arange(100, 140))

    def test_assignment_is_nearest_centre(self, rng):
        xyz = rng.normal(size=(60, 3))
        centers, assign = nn_group(xyz, 7)
        for i in range(60):
            d = [np.sum((xyz[i] - xyz[c]) ** 2) for c in centers]
            assert d[assign[i]] == min(d)

    def test_too_many_centres(self, rng):
        with pytest.raises(ValueError):
            nn_group(rng.normal(size=(3, 3)), 4)
        with pytest.raises(ValueError):
            farthest_point_sample(rng.normal(size=(3, 3)), 4)

    def test_make_grouping_clamps(self, rng):
        g = make_grouping(rng.normal(size=(3, 3)), np.arange(3), 64)
        assert g.m == 3

    @pytest.mark.parametrize("sampling", ["random", "density"])
    def test_sampling_ablations_keep_only_centres(self, rng, sampling):
        xyz = rng.normal(size=(20, 3))
        counts = rng.integers(1, 9, 20).astype(float)
        g = make_grouping(xyz, np.arange(20), 5, sampling, counts, seed=3)
        assert (g.assign >= 0).sum() == 5
        if sampling == "density":
            assert set(g.centers.tolist()) == set(np.argsort(-counts, kind="stable")[:5].tolist())


# -- multi-voxel aggregation -----------------------------------------------------------------

class TestMva:
    cfg = tiny_heu_config(d=D, d_in=D)

    def test_singleton_groups_apply_mlp_with_zero_offset(self, rng):
        params = heu_params(self.cfg)
        n, t = 5, 2
        xyz = rng.normal(size=(n, 3))
        g = make_grouping(xyz, np.arange(n), n)
        F = rng.normal(size=(n * t, D))
        out = mva_spatial(Tensor(F), np.ones((n, t), bool), g, params, self.cfg).data
        mlp = np_mlp_params(params, "heu/mva_spatial")
        for grp, c in enumerate(g.centers):
            for tau in range(t):
                want = np_mlp(np.r_[F[c * t + tau], np.zeros(3)][None], mlp)[0]
                np.testing.assert_allclose(out[grp * t + tau], want, rtol=1e-12, atol=1e-14)

    def test_single_group_takes_max_over_all(self, rng):
        params = heu_params(self.cfg)
        n = 6
        xyz = rng.normal(size=(n, 3))
        g = make_grouping(xyz, np.arange(n), 1)
        F = rng.normal(size=(n, D))
        out = mva_spatial(Tensor(F), np.ones((n, 1), bool), g, params, self.cfg).data
        mlp = np_mlp_params(params, "heu/mva_spatial")
        feats = np_mlp(np.c_[F, (xyz - xyz[0]) / self.cfg.offset_scale], mlp)
        np.testing.assert_allclose(out[0], feats.max(axis=0), rtol=1e-12)

    def test_absent_frames_are_skipped(self, rng):
        params = heu_params(self.cfg)
        g = make_grouping(rng.normal(size=(2, 3)), np.arange(2), 1)
        present = np.array([[True, False], [False, False]])
        out = mva_spatial(Tensor(rng.normal(size=(4, D))), present, g, params, self.cfg).data
        assert not out[1].any()

    def test_temporal_mean_of_one_to_five(self):
        params = ParameterSet()
        params.add("heu/mva_temporal/l0/w", np.eye(1))
        params.add("heu/mva_temporal/l0/b", np.zeros(1))
        out = mva_temporal(Tensor(np.arange(1.0, 6.0)[:, None]), 5, params).data
        assert out[0, 0] == 3.0

    def test_temporal_t1_is_identity_pooling(self, rng):
        params = heu_params(self.cfg)
        x = rng.normal(size=(3, D))
        out = mva_temporal(Tensor(x), 1, params).data
        np.testing.assert_allclose(out, np_mlp(x, np_mlp_params(params, "heu/mva_temporal")), rtol=1e-12)

    def test_temporal_constant_across_frames(self, rng):
        params = heu_params(self.cfg)
        x = rng.normal(size=(2, D))
        out = mva_temporal(Tensor(np.repeat(x, 4, axis=0)), 4, params).data
        np.testing.assert_allclose(out, np_mlp(x, np_mlp_params(params, "heu/mva_temporal")), rtol=1e-12)


# -- attention layers --------------------------------------------------------------------

class TestAttentionLayers:
    cfg = tiny_heu_config(d=D, d_in=D)

    def test_single_token_has_unit_weight(self, rng):
        params = heu_params(self.cfg)
        V = rng.normal(size=(1, D))
        out, maps = htsf_layer(Tensor(V), params, 0, self.cfg)
        assert maps[0].shape == (1, 1) and maps[0][0, 0] == 1.0
        p = "heu/htsf/layer0"
        vproj = V @ p_np(params, f"{p}/wv")
        x = np_ln(V + vproj, p_np(params, f"{p}/ln1/g"), p_np(params, f"{p}/ln1/b"))
        want = np_ln(x + np_mlp(x, np_mlp_params(params, f"{p}/mlp")), p_np(params, f"{p}/ln2/g"),
                     p_np(params, f"{p}/ln2/b"))
        np.testing.assert_allclose(out.data, want, rtol=1e-10, atol=1e-12)

    def test_identical_tokens_attend_uniformly(self, rng):
        params = heu_params(self.cfg)
        v = rng.normal(size=(1, D))
        _, maps = htsf_layer(Tensor(np.repeat(v, 2, axis=0)), params, 0, self.cfg)
        np.testing.assert_allclose(maps[0], 0.5, atol=1e-15)

    def test_htsf_matches_oracle(self, rng):
        params = heu_params(self.cfg, seed=5)
        V = rng.normal(size=(3, D))
        out, _ = htsf_layer(Tensor(V), params, 0, self.cfg)
        np.testing.assert_allclose(out.data, np_htsf(V, params, 0), rtol=0, atol=1e-10)

    def test_ltsf_matches_oracle(self, rng):
        params = heu_params(self.cfg, seed=6)
        U, H = rng.normal(size=(2, D)), rng.normal(size=(3, D))
        out, maps = ltsf_layer(Tensor(U), Tensor(H), params, 0, self.cfg)
        np.testing.assert_allclose(out.data, np_ltsf(U, H, params, 0), rtol=0, atol=1e-10)
        assert maps[1].shape == (2, 3)

    def test_single_key_cross_attention_returns_its_value(self, rng):
        q, h = rng.normal(size=(4, D)), rng.normal(size=(1, D))
        wq, wk, wv = (Tensor(rng.normal(size=(D, D))) for _ in range(3))
        out, _ = attention(Tensor(q), Tensor(h), wq, wk, wv)
        np.testing.assert_allclose(out.data, np.repeat(h @ wv.data, 4, axis=0), rtol=1e-14)

    def test_zero_query_weights_give_uniform_attention(self, rng):
        q, h = rng.normal(size=(3, D)), rng.normal(size=(5, D))
        _, maps = attention(Tensor(q), Tensor(h), Tensor(np.zeros((D, D))),
                            Tensor(rng.normal(size=(D, D))), Tensor(rng.normal(size=(D, D))))
        np.testing.assert_allclose(maps[0], 0.2, atol=1e-15)

    def test_multi_head_rows_normalised(self, rng):
        cfg = tiny_heu_config(d=D, d_in=D, heads=2)
        params = heu_params(cfg)
        _, maps = htsf_layer(Tensor(rng.normal(size=(5, D))), params, 0, cfg)
        assert len(maps) == 2
        for m in maps:
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        params = heu_params(self.cfg)
        V = rng.normal(size=(4, D))
        perm = np.array([2, 0, 3, 1])
        a, _ = htsf_layer(Tensor(V), params, 0, self.cfg)
        b, _ = htsf_layer(Tensor(V[perm]), params, 0, self.cfg)
        np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)

    def test_no_residual_mode_is_literal(self, rng):
        cfg = tiny_heu_config(d=D, d_in=D, residual=False)
        params = heu_params(cfg)
        V = rng.normal(size=(3, D))
        p = "heu/htsf/layer0"
        out, _ = htsf_layer(Tensor(V), params, 0, cfg)
        att = np_attention(V, V, *(p_np(params, f"{p}/{n}") for n in ("wq", "wk", "wv")))
        np.testing.assert_allclose(out.data, np_mlp(att, np_mlp_params(params, f"{p}/mlp")), atol=1e-12)


# -- whole unit ------------------------------------------------------------------------------

def frames_at_cells(cfg: CylGridConfig, cells_per_frame, rng):
    out = []
    for cells in cells_per_frame:
        xyz = cfg.cell_centers_xyz(np.asarray(cells))
        out.append(PointCloudFrame(np.c_[xyz, rng.random(len(cells))]))
    return out


class TestHeuForward:
    def test_near_only_scene_reduces_to_low_flow(self, rng):
        cfg = tiny_heu_config(d=D, d_in=D)
        grid = TINY_GRID
        near = np.flatnonzero(grid.cell_centers(np.arange(grid.n_cells))[:, 0] < 3.0)[:10]
        grids = [voxelize_frame(f, grid)[0] for f in frames_at_cells(grid, [near, near[2:]], rng)]
        params = heu_params(cfg)
        full = plan_heu(grids, cfg)
        assert full.high is None
        low_only = plan_heu(grids, tiny_heu_config(d=D, d_in=D, mode="ltsf"))
        F = Tensor(rng.normal(size=(len(full.voxels) * 2, D)))
        a = heu_forward(F, full, params, cfg)
        b = heu_forward(F, low_only, params, cfg)
        assert a.n_high == 0
        np.testing.assert_array_equal(a.embedding.data, b.embedding.data)

    def test_n1_t1_singletons_match_composed_oracle(self, rng):
        cfg = HeuConfig(d=D, d_in=D, t=1, layers=1, m_high=100, m_low=100)
        grid = TINY_GRID
        centres = grid.cell_centers(np.arange(grid.n_cells))[:, 0]
        cells = np.r_[np.flatnonzero(centres >= 3.0)[::17][:5], np.flatnonzero(centres < 3.0)[::9][:6]]
        grids = [voxelize_frame(f, grid)[0] for f in frames_at_cells(grid, [cells], rng)]
        plan = plan_heu(grids, cfg)
        params = heu_params(cfg, seed=9)
        F = rng.normal(size=(len(plan.voxels), D))
        out = heu_forward(Tensor(F), plan, params, cfg)
        got = scatter_to_grid(out.embedding, out.recipe, grid.n_cells).data

        far = grid.cell_centers(plan.voxels)[:, 0] >= 3.0
        tokens = np_mlp(np_mlp(np.c_[F, np.zeros((len(F), 3))], np_mlp_params(params, "heu/mva_spatial")),
                        np_mlp_params(params, "heu/mva_temporal"))
        H = np_htsf(tokens[far], params, 0)
        U = np_ltsf(tokens[~far], H, params, 0)
        want = np.zeros((grid.n_cells, D))
        want[plan.voxels[far]] = H
        want[plan.voxels[~far]] = U
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_paper_preset_builds_six_layers_per_flow(self):
        cfg = HeuConfig.paper()
        assert cfg.t == 5 and cfg.layers == 6
        params = ParameterSet()
        init_heu_params(params, cfg, np.random.default_rng(0))
        for flow in ("htsf", "ltsf"):
            layers = {n.split("/")[2] for n in params.with_prefix(f"heu/{flow}/")}
            assert layers == {f"layer{i}" for i in range(6)}
        assert params["heu/htsf/layer5/wq"].shape == (256, 256)

    def test_token_count_is_bounded(self, rng):
        cfg = tiny_heu_config(d=D, d_in=D)
        frames = frames_at_cells(TINY_GRID, [rng.choice(TINY_GRID.n_cells, 60, replace=False)] * 2, rng)
        plan = plan_heu([voxelize_frame(f, TINY_GRID)[0] for f in frames], cfg)
        out = heu_forward(Tensor(rng.normal(size=(len(plan.voxels) * 2, D))), plan, heu_params(cfg), cfg)
        assert out.embedding.shape[0] == out.n_high + out.n_low <= 6
        for m in out.attention:
            assert m.shape[1] <= 3

    @pytest.mark.parametrize("fusion", ["low_q", "high_q", "add", "concat"])
    def test_fusion_variants_run(self, rng, fusion):
        cfg = tiny_heu_config(d=D, d_in=D, fusion=fusion)
        params = heu_params(cfg)
        frames = frames_at_cells(TINY_GRID, [rng.choice(TINY_GRID.n_cells, 40, replace=False)] * 2, rng)
        plan = plan_heu([voxelize_frame(f, TINY_GRID)[0] for f in frames], cfg)
        out = heu_forward(Tensor(rng.normal(size=(len(plan.voxels) * 2, D))), plan, params, cfg)
        assert np.isfinite(out.embedding.data).all()

    @pytest.mark.parametrize("mode,high,low", [("none", False, False), ("htsf", True, False), ("ltsf", False, True)])
    def test_modes(self, rng, mode, high, low):
        cfg = tiny_heu_config(d=D, d_in=D, mode=mode)
        frames = frames_at_cells(TINY_GRID, [rng.choice(TINY_GRID.n_cells, 40, replace=False)] * 2, rng)
        plan = plan_heu([voxelize_frame(f, TINY_GRID)[0] for f in frames], cfg)
        assert (plan.high is not None) == high and (plan.low is not None) == low

    def test_whole_unit_gradient(self):
        assert run_case("heu_unit").max_rel_err < 1e-4


class TestScatterToGrid:
    def test_one_token_three_members(self, rng):
        e = rng.normal(size=(1, D))
        out = scatter_to_grid(Tensor(e), ScatterRecipe(np.array([2, 5, 7]), np.zeros(3, int)), 9).data
        np.testing.assert_array_equal(out[[2, 5, 7]], np.repeat(e, 3, axis=0))
        assert not np.delete(out, [2, 5, 7], axis=0).any()

    def test_group_mean_recovers_embeddings(self, rng):
        e = rng.normal(size=(3, D))
        token = np.array([0, 0, 1, 2, 2, 2])
        cells = np.array([4, 1, 9, 0, 3, 7])
        out = scatter_to_grid(Tensor(e), ScatterRecipe(cells, token), 10).data
        for k in range(3):
            np.testing.assert_array_equal(out[cells[token == k]].mean(axis=0), e[k])

    def test_empty_recipe(self):
        out = scatter_to_grid(None, ScatterRecipe.empty(), 5, D).data
        assert out.shape == (5, D) and not out.any()

    def test_out_of_bounds_token(self, rng):
        with pytest.raises(IndexError):
            scatter_to_grid(Tensor(rng.normal(size=(2, D))), ScatterRecipe(np.array([0]), np.array([2])), 4)


class TestHeuConfig:
    @pytest.mark.parametrize("kw", [dict(t=0), dict(layers=0), dict(far_fraction=1.0), dict(d=6, heads=4),
                                    dict(mode="both"), dict(fusion="x"), dict(sampling="y")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            HeuConfig(**kw)
