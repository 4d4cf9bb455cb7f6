"""Cross-modal blending: context gathering, windowed attention, gating."""

import numpy as np
import pytest

from quadfuse import autodiff as ad
from quadfuse import blending
from quadfuse.encoders import FeatureMap
from quadfuse.geometry import BEVGridSpec, CameraModel, DepthMap
from helpers import check_param_grads

D = 3
CFG = blending.BlendConfig(d=D, k_camera=3, k_bev=3)


def cam(width=4, height=4, focal=3.0):
    return CameraModel(fx=focal, fy=focal, cx=(width - 1) / 2,
                       cy=(height - 1) / 2, width=width, height=height)


def bev_grid():
    return BEVGridSpec(x_range=(-2.0, 2.0), z_range=(1.0, 6.0),
                       y_range=(-3.0, 1.0), cell_x=1.0, cell_z=1.0)


def radar_grid():
    return BEVGridSpec(x_range=(-2.0, 2.0), z_range=(1.0, 6.0),
                       y_range=(-0.2, 0.4), cell_x=1.0, cell_z=1.0)


def random_map(rng, plane, shape, grid=None, mask=None):
    data = rng.normal(size=(D,) + shape)
    return FeatureMap(plane=plane, data=data, mask=mask, grid=grid)


def random_scene(rng, dense_masks=False):
    grid, rgrid = bev_grid(), radar_grid()
    camera = cam()
    if dense_masks:
        lmask = np.ones((grid.nz, grid.nx), dtype=bool)
        rmask = np.ones((rgrid.nz, rgrid.nx), dtype=bool)
    else:
        lmask = rng.uniform(size=(grid.nz, grid.nx)) < 0.7
        rmask = rng.uniform(size=(rgrid.nz, rgrid.nx)) < 0.5
    depth = DepthMap(rng.uniform(2.0, 6.0, (4, 4)),
                     rng.uniform(size=(4, 4)) < 0.9)
    depth_g = DepthMap(rng.uniform(2.0, 6.0, (4, 4)),
                       rng.uniform(size=(4, 4)) < 0.9)
    return blending.BlendScene(
        phi_c=random_map(rng, "camera", (4, 4)),
        phi_g=random_map(rng, "camera", (4, 4)),
        phi_l=random_map(rng, "bev", (grid.nz, grid.nx), grid=grid,
                         mask=lmask),
        phi_r=random_map(rng, "bev", (rgrid.nz, rgrid.nx), grid=rgrid,
                         mask=rmask),
        cam_rgb=camera, cam_gated=camera,
        depth_rgb=depth, depth_gated=depth_g)


class TestConfig:
    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            blending.BlendConfig(k_camera=4)
        with pytest.raises(ValueError):
            blending.BlendConfig(k_bev=0)

    def test_window_by_plane(self):
        cfg = blending.BlendConfig(k_camera=5, k_bev=3)
        assert cfg.window("camera") == 5
        assert cfg.window("bev") == 3


class TestGate:
    def test_gate_lives_in_unit_interval(self):
        params = blending.BlendParams.init(CFG, seed=0)
        params.store["lidar.gate"].data[:] = [-100.0, 0.0, 100.0]
        g = params.gate("lidar").data
        assert (g > 0).all() and (g < 1).all()
        assert g[0] < 1e-6 and g[2] > 1 - 1e-6
        assert g[1] == 0.5


class TestGatherLidarContext:
    def test_constant_map_gives_constant_context(self):
        grid = bev_grid()
        const = np.arange(1.0, D + 1)
        data = np.tile(const[:, None, None], (1, grid.nz, grid.nx))
        phi_l = FeatureMap(plane="bev", data=data,
                           mask=np.ones((grid.nz, grid.nx), dtype=bool),
                           grid=grid)
        depth = DepthMap(np.full((4, 4), 3.0), np.ones((4, 4), dtype=bool))
        ctx = blending.gather_lidar_context(phi_l, cam(), depth)
        assert ctx.mask.all()
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(ctx.data.data[:, i, j], const,
                                           atol=1e-12)

    def test_invalid_depth_pixel_masked_zero(self):
        grid = bev_grid()
        phi_l = FeatureMap(plane="bev",
                           data=np.ones((D, grid.nz, grid.nx)),
                           mask=np.ones((grid.nz, grid.nx), dtype=bool),
                           grid=grid)
        valid = np.ones((4, 4), dtype=bool)
        valid[2, 1] = False
        depth = DepthMap(np.where(valid, 3.0, 0.0), valid)
        ctx = blending.gather_lidar_context(phi_l, cam(), depth)
        assert not ctx.mask[2, 1]
        assert (ctx.data.data[:, 2, 1] == 0).all()
        assert ctx.mask[0, 0]

    def test_matches_per_pixel_oracle(self, rng):
        grid = bev_grid()
        data = rng.normal(size=(D, grid.nz, grid.nx))
        mask = rng.uniform(size=(grid.nz, grid.nx)) < 0.6
        phi_l = FeatureMap(plane="bev", data=data, mask=mask, grid=grid)
        camera = cam()
        depth = DepthMap(rng.uniform(1.5, 8.0, (4, 4)),
                         rng.uniform(size=(4, 4)) < 0.85)
        ctx = blending.gather_lidar_context(phi_l, camera, depth)
        for i in range(4):
            for j in range(4):
                if not depth.valid[i, j]:
                    assert not ctx.mask[i, j]
                    continue
                z = depth.values[i, j]
                x = (j - camera.cx) * z / camera.fx
                r = np.clip(grid.row_of(z), 0.0, grid.nz - 1.0)
                c = np.clip(grid.col_of(x), 0.0, grid.nx - 1.0)
                r0 = min(int(np.floor(r)), grid.nz - 2) if grid.nz > 1 else 0
                c0 = min(int(np.floor(c)), grid.nx - 2) if grid.nx > 1 else 0
                fr, fc = r - r0, c - c0
                w = np.array([(1 - fr) * (1 - fc), (1 - fr) * fc,
                              fr * (1 - fc), fr * fc])
                cells = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]
                w = np.array([wi if mask[a, b] else 0.0
                              for wi, (a, b) in zip(w, cells)])
                tot = w.sum()
                if tot <= 1e-12:
                    assert not ctx.mask[i, j]
                    assert (ctx.data.data[:, i, j] == 0).all()
                    continue
                w = w / tot
                expect = sum(wi * data[:, a, b]
                             for wi, (a, b) in zip(w, cells))
                assert ctx.mask[i, j]
                np.testing.assert_allclose(ctx.data.data[:, i, j], expect,
                                           atol=1e-10)

    def test_out_of_roi_pixels_clamp_to_border(self):
        # narrow grid: lifted points at |x| > 1 clamp onto the edge columns
        grid = BEVGridSpec(x_range=(-1.0, 1.0), z_range=(1.0, 6.0),
                           y_range=(-3.0, 1.0), cell_x=1.0, cell_z=1.0)
        data = np.zeros((D, grid.nz, grid.nx))
        data[:, :, 0] = 5.0
        data[:, :, 1] = 7.0
        phi_l = FeatureMap(plane="bev", data=data,
                           mask=np.ones((grid.nz, grid.nx), dtype=bool),
                           grid=grid)
        depth = DepthMap(np.full((4, 4), 4.0), np.ones((4, 4), dtype=bool))
        ctx = blending.gather_lidar_context(phi_l, cam(), depth)
        # column 0 lifts to x = -2, beyond the left edge
        assert ctx.mask[1, 0]
        np.testing.assert_allclose(ctx.data.data[:, 1, 0], 5.0, atol=1e-12)
        assert ctx.mask[1, 3]
        np.testing.assert_allclose(ctx.data.data[:, 1, 3], 7.0, atol=1e-12)


class TestGatherCameraContext:
    def test_constant_camera_map(self, rng):
        grid = bev_grid()
        const = np.array([2.0, -1.0, 0.5])
        data = np.tile(const[:, None, None], (1, 4, 4))
        phi = FeatureMap(plane="camera", data=data)
        ctx = blending.gather_camera_context(phi, cam(), grid)
        assert ctx.plane == "bev"
        assert ctx.mask.any()
        for iz, ix in np.argwhere(ctx.mask):
            np.testing.assert_allclose(ctx.data.data[:, iz, ix], const,
                                       atol=1e-12)

    def test_matches_projection_oracle(self, rng):
        grid = bev_grid()
        camera = cam()
        fdata = rng.normal(size=(D, 4, 4))
        phi = FeatureMap(plane="camera", data=fdata)
        heights = np.full((grid.nz, grid.nx), -1.0)
        ctx = blending.gather_camera_context(phi, camera, grid, heights)
        zs, xs = grid.cell_centers()
        for iz in range(grid.nz):
            for ix in range(grid.nx):
                x, z, y = xs[ix], zs[iz], -1.0
                u = camera.fx * x / z + camera.cx
                v = camera.fy * y / z + camera.cy
                inside = (z > 0 and 0 <= u < camera.width
                          and 0 <= v < camera.height)
                if not inside:
                    assert not ctx.mask[iz, ix]
                    continue
                # sampling clamps to the border cell centers
                u = min(max(u, 0.0), camera.width - 1.0)
                v = min(max(v, 0.0), camera.height - 1.0)
                r0 = min(int(np.floor(v)), 2)
                c0 = min(int(np.floor(u)), 2)
                fr, fc = v - r0, u - c0
                expect = ((1 - fr) * (1 - fc) * fdata[:, r0, c0]
                          + (1 - fr) * fc * fdata[:, r0, c0 + 1]
                          + fr * (1 - fc) * fdata[:, r0 + 1, c0]
                          + fr * fc * fdata[:, r0 + 1, c0 + 1])
                assert ctx.mask[iz, ix]
                np.testing.assert_allclose(ctx.data.data[:, iz, ix], expect,
                                           atol=1e-10)

    def test_height_grid_shape_checked(self):
        phi = FeatureMap(plane="camera", data=np.zeros((D, 4, 4)))
        with pytest.raises(ValueError):
            blending.gather_camera_context(phi, cam(), bev_grid(),
                                           np.zeros((2, 2)))


class TestBlendContexts:
    def test_additive_identity(self, rng):
        a = random_map(rng, "camera", (4, 4),
                       mask=np.ones((4, 4), dtype=bool))
        zero = FeatureMap(plane="camera", data=np.zeros((D, 4, 4)),
                          mask=np.zeros((4, 4), dtype=bool))
        out = blending.blend_contexts(a, zero)
        assert np.array_equal(out.data.data, a.data.data)
        assert np.array_equal(out.mask, a.mask)

    def test_commutative_exact(self, rng):
        a = random_map(rng, "camera", (4, 4))
        b = random_map(rng, "camera", (4, 4))
        ab = blending.blend_contexts(a, b).data.data
        ba = blending.blend_contexts(b, a).data.data
        assert np.array_equal(ab, ba)

    def test_elementwise_definition(self, rng):
        a = random_map(rng, "camera", (4, 4))
        b = random_map(rng, "camera", (4, 4))
        out = blending.blend_contexts(a, b).data.data
        assert np.array_equal(out, a.data.data + b.data.data)
        resid = out - a.data.data - b.data.data
        assert np.abs(resid).max() < 1e-15

    def test_mask_union(self):
        ma = np.zeros((4, 4), dtype=bool)
        mb = np.zeros((4, 4), dtype=bool)
        ma[0, 0] = mb[1, 1] = True
        a = FeatureMap(plane="camera", data=np.zeros((D, 4, 4)), mask=ma)
        b = FeatureMap(plane="camera", data=np.zeros((D, 4, 4)), mask=mb)
        out = blending.blend_contexts(a, b)
        assert out.mask[0, 0] and out.mask[1, 1]
        assert out.mask.sum() == 2

    def test_shape_mismatch_rejected(self, rng):
        a = random_map(rng, "camera", (4, 4))
        b = random_map(rng, "camera", (4, 6))
        with pytest.raises(ValueError):
            blending.blend_contexts(a, b)


def attention_oracle(query, context, values, wq, wk, wv, mask, k):
    """Straight double loop over positions and window slots."""
    d, h, w = query.shape
    out = np.zeros_like(query)
    half = k // 2
    for i in range(h):
        for j in range(w):
            q = wq @ query[:, i, j]
            slots = []
            for di in range(-half, half + 1):
                for dj in range(-half, half + 1):
                    a, b = i + di, j + dj
                    if 0 <= a < h and 0 <= b < w and mask[a, b]:
                        slots.append((wk @ context[:, a, b],
                                      wv @ values[:, a, b]))
            if not slots:
                out[:, i, j] = query[:, i, j]
                continue
            logits = np.array([kv[0] @ q for kv in slots]) / np.sqrt(d)
            e = np.exp(logits - logits.max())
            probs = e / e.sum()
            out[:, i, j] = sum(p * kv[1] for p, kv in zip(probs, slots))
    return out


class TestWindowedAttention:
    def test_matches_loop_oracle_cross(self, rng):
        params = blending.BlendParams.init(CFG, seed=1)
        qdata = rng.normal(size=(D, 8, 8))
        cdata = rng.normal(size=(D, 8, 8))
        mask = rng.uniform(size=(8, 8)) < 0.6
        query = FeatureMap(plane="camera", data=qdata)
        context = FeatureMap(plane="camera", data=cdata, mask=mask)
        out = blending.windowed_attention(query, context, "cam_rgb", params,
                                          "cross")
        expect = attention_oracle(
            qdata, cdata, cdata,
            params.store["cam_rgb.cross.q"].data,
            params.store["cam_rgb.cross.k"].data,
            params.store["cam_rgb.cross.v"].data, mask, 3)
        np.testing.assert_allclose(out.data.data, expect, atol=1e-10)

    def test_matches_loop_oracle_intra(self, rng):
        params = blending.BlendParams.init(CFG, seed=2)
        qdata = rng.normal(size=(D, 8, 8))
        query = FeatureMap(plane="camera", data=qdata)
        out = blending.windowed_attention(query, query, "cam_rgb", params,
                                          "intra")
        full = np.ones((8, 8), dtype=bool)
        expect = attention_oracle(
            qdata, qdata, qdata,
            params.store["cam_rgb.intra.q"].data,
            params.store["cam_rgb.intra.k"].data,
            params.store["cam_rgb.intra.v"].data, full, 3)
        np.testing.assert_allclose(out.data.data, expect, atol=1e-10)

    def test_equal_keys_average_values(self, rng):
        params = blending.BlendParams.init(CFG, seed=3)
        qdata = rng.normal(size=(D, 5, 5))
        cdata = rng.normal(size=(D, 5, 5))
        cdata[:] = cdata * 0 + rng.normal(size=(D, 1, 1))  # constant keys
        cdata = cdata + rng.normal(size=(D, 5, 5)) * 0
        vdata = rng.normal(size=(D, 5, 5))
        # constant context keys but varying values: feed context with the
        # constant map and check mode=intra against a value-carrying query
        query = FeatureMap(plane="camera", data=vdata)
        context = FeatureMap(plane="camera", data=cdata,
                             mask=np.ones((5, 5), dtype=bool))
        out = blending.windowed_attention(query, context, "cam_rgb", params,
                                          "intra")
        wv = params.store["cam_rgb.intra.v"].data
        window = [wv @ vdata[:, i, j] for i in (1, 2, 3) for j in (1, 2, 3)]
        np.testing.assert_allclose(out.data.data[:, 2, 2],
                                   np.mean(window, axis=0), atol=1e-10)

    def test_k1_returns_value_at_pixel(self, rng):
        cfg = blending.BlendConfig(d=D, k_camera=1, k_bev=1)
        params = blending.BlendParams.init(cfg, seed=4)
        qdata = rng.normal(size=(D, 4, 4))
        cdata = rng.normal(size=(D, 4, 4))
        query = FeatureMap(plane="camera", data=qdata)
        context = FeatureMap(plane="camera", data=cdata,
                             mask=np.ones((4, 4), dtype=bool))
        out = blending.windowed_attention(query, context, "cam_rgb", params,
                                          "cross")
        wv = params.store["cam_rgb.cross.v"].data
        expect = np.einsum("cd,dhw->chw", wv, cdata)
        np.testing.assert_allclose(out.data.data, expect, atol=1e-12)

    def test_all_masked_returns_query(self, rng):
        params = blending.BlendParams.init(CFG, seed=5)
        qdata = rng.normal(size=(D, 4, 4))
        query = FeatureMap(plane="camera", data=qdata)
        context = FeatureMap(plane="camera", data=rng.normal(size=(D, 4, 4)),
                             mask=np.zeros((4, 4), dtype=bool))
        out = blending.windowed_attention(query, context, "cam_rgb", params,
                                          "cross")
        assert np.array_equal(out.data.data, qdata)

    def test_logit_shift_invariance(self, rng):
        # constant query vector: adding Wk^-1 q to every context cell
        # shifts all logits by |q|^2, which softmax must cancel
        params = blending.BlendParams.init(CFG, seed=6)
        qvec = rng.normal(size=D)
        qdata = np.tile(qvec[:, None, None], (1, 5, 5))
        cdata = rng.normal(size=(D, 5, 5))
        wq = params.store["cam_rgb.intra.q"].data
        wk = params.store["cam_rgb.intra.k"].data
        shift = np.linalg.solve(wk, wq @ qvec)
        query = FeatureMap(plane="camera", data=qdata)
        base_ctx = FeatureMap(plane="camera", data=cdata,
                              mask=np.ones((5, 5), dtype=bool))
        shifted_ctx = FeatureMap(plane="camera",
                                 data=cdata + shift[:, None, None],
                                 mask=np.ones((5, 5), dtype=bool))
        a = blending.windowed_attention(query, base_ctx, "cam_rgb", params,
                                        "intra")
        b = blending.windowed_attention(query, shifted_ctx, "cam_rgb", params,
                                        "intra")
        np.testing.assert_allclose(a.data.data, b.data.data, atol=1e-12)

    def test_output_in_value_convex_hull(self, rng):
        params = blending.BlendParams.init(CFG, seed=7)
        qdata = rng.normal(size=(D, 6, 6))
        cdata = rng.normal(size=(D, 6, 6))
        query = FeatureMap(plane="camera", data=qdata)
        context = FeatureMap(plane="camera", data=cdata,
                             mask=np.ones((6, 6), dtype=bool))
        out = blending.windowed_attention(query, context, "cam_rgb", params,
                                          "cross").data.data
        vproj = np.einsum("cd,dhw->chw",
                          params.store["cam_rgb.cross.v"].data, cdata)
        for i in range(6):
            for j in range(6):
                i0, i1 = max(0, i - 1), min(6, i + 2)
                j0, j1 = max(0, j - 1), min(6, j + 2)
                w = vproj[:, i0:i1, j0:j1].reshape(D, -1)
                assert (out[:, i, j] >= w.min(axis=1) - 1e-12).all()
                assert (out[:, i, j] <= w.max(axis=1) + 1e-12).all()


class TestCombine:
    def test_midpoint_gate(self, rng):
        base = random_map(rng, "camera", (4, 4))
        cross = random_map(rng, "camera", (4, 4))
        intra = random_map(rng, "camera", (4, 4))
        raw = ad.tensor(np.zeros(D), requires_grad=True)
        out = blending.combine_cross_intra(cross, intra, base, raw)
        expect = (base.data.data
                  + 0.5 * (cross.data.data + intra.data.data))
        np.testing.assert_allclose(out.data.data, expect, atol=1e-14)

    def test_saturated_gate(self, rng):
        base = random_map(rng, "camera", (4, 4))
        cross = random_map(rng, "camera", (4, 4))
        intra = random_map(rng, "camera", (4, 4))
        raw = ad.tensor(np.full(D, 1e9), requires_grad=True)
        out = blending.combine_cross_intra(cross, intra, base, raw)
        expect = base.data.data + cross.data.data
        np.testing.assert_allclose(out.data.data, expect, atol=1e-5)

    def test_gate_gradient(self, rng):
        params = blending.BlendParams.init(CFG, seed=8)
        params.store["lidar.gate"].data[:] = rng.normal(size=D)
        base = random_map(rng, "camera", (4, 4))
        cross = random_map(rng, "camera", (4, 4))
        intra = random_map(rng, "camera", (4, 4))
        w = rng.normal(size=(D, 4, 4))

        def loss():
            out = blending.combine_cross_intra(cross, intra, base,
                                               params.store["lidar.gate"])
            return ad.tsum(out.data * w)

        check_param_grads(loss, params.store, names=["lidar.gate"])

    def test_shape_mismatch_rejected(self, rng):
        a = random_map(rng, "camera", (4, 4))
        b = random_map(rng, "camera", (4, 6))
        with pytest.raises(ValueError):
            blending.combine_cross_intra(a, b, a, ad.tensor(np.zeros(D)))


class TestBlendAll:
    def test_channel_mismatch_rejected(self, rng):
        scene = random_scene(rng)
        bad = FeatureMap(plane="camera",
                         data=np.zeros((D + 1, 4, 4)))
        with pytest.raises(ValueError):
            blending.BlendScene(
                phi_c=bad, phi_g=scene.phi_g, phi_l=scene.phi_l,
                phi_r=scene.phi_r, cam_rgb=scene.cam_rgb,
                cam_gated=scene.cam_gated, depth_rgb=scene.depth_rgb,
                depth_gated=scene.depth_gated)

    def test_zero_camera_maps_leave_only_intra(self, rng):
        params = blending.BlendParams.init(CFG, seed=9)
        scene = random_scene(rng)
        scene.phi_c = FeatureMap(plane="camera", data=np.zeros((D, 4, 4)))
        scene.phi_g = FeatureMap(plane="camera", data=np.zeros((D, 4, 4)))
        _, _, star_l, _ = blending.blend_all(scene, params)
        intra = blending.windowed_attention(scene.phi_l, scene.phi_l,
                                            "lidar", params, "intra")
        g = params.gate("lidar").data[:, None, None]
        expect = scene.phi_l.data.data + (1 - g) * intra.data.data
        np.testing.assert_allclose(star_l.data.data, expect, atol=1e-13)

    def test_empty_lidar_falls_back_to_intra_plus_base(self, rng):
        params = blending.BlendParams.init(CFG, seed=10)
        scene = random_scene(rng)
        grid = scene.phi_l.grid
        scene.phi_l = FeatureMap(plane="bev",
                                 data=np.zeros((D, grid.nz, grid.nx)),
                                 mask=np.zeros((grid.nz, grid.nx), dtype=bool),
                                 grid=grid)
        star_c, star_g, _, _ = blending.blend_all(scene, params)
        for phi, star, direction in ((scene.phi_c, star_c, "cam_rgb"),
                                     (scene.phi_g, star_g, "cam_gated")):
            intra = blending.windowed_attention(phi, phi, direction, params,
                                                "intra")
            g = params.gate(direction).data[:, None, None]
            expect = (phi.data.data + g * phi.data.data
                      + (1 - g) * intra.data.data)
            np.testing.assert_allclose(star.data.data, expect, atol=1e-13)

    def test_radar_path_base_plus_cross(self, rng):
        params = blending.BlendParams.init(CFG, seed=11)
        scene = random_scene(rng)
        _, _, _, star_r = blending.blend_all(scene, params)
        ctx = blending.gather_camera_context(scene.phi_c, scene.cam_rgb,
                                             scene.phi_r.grid)
        cross = blending.windowed_attention(scene.phi_r, ctx, "radar",
                                            params, "cross")
        expect = scene.phi_r.data.data + cross.data.data
        np.testing.assert_allclose(star_r.data.data, expect, atol=1e-13)

    def test_composition_matches_stepwise_reference(self, rng):
        params = blending.BlendParams.init(CFG, seed=12)
        scene = random_scene(rng)
        star_c, star_g, star_l, star_r = blending.blend_all(scene, params)

        ctx_lc = blending.gather_lidar_context(scene.phi_l, scene.cam_rgb,
                                               scene.depth_rgb)
        ctx_lg = blending.gather_lidar_context(scene.phi_l, scene.cam_gated,
                                               scene.depth_gated)
        ctx_lcg = blending.blend_contexts(ctx_lc, ctx_lg)
        for phi, star, direction in ((scene.phi_c, star_c, "cam_rgb"),
                                     (scene.phi_g, star_g, "cam_gated")):
            cross = blending.windowed_attention(phi, ctx_lcg, direction,
                                                params, "cross")
            intra = blending.windowed_attention(phi, phi, direction, params,
                                                "intra")
            ref = blending.combine_cross_intra(
                cross, intra, phi, params.store[f"{direction}.gate"])
            assert np.array_equal(star.data.data, ref.data.data)

        ctx_cl = blending.gather_camera_context(scene.phi_c, scene.cam_rgb,
                                                scene.phi_l.grid)
        ctx_gl = blending.gather_camera_context(scene.phi_g, scene.cam_gated,
                                                scene.phi_l.grid)
        cross_l = blending.windowed_attention(
            scene.phi_l, blending.blend_contexts(ctx_cl, ctx_gl), "lidar",
            params, "cross")
        intra_l = blending.windowed_attention(scene.phi_l, scene.phi_l,
                                              "lidar", params, "intra")
        ref_l = blending.combine_cross_intra(cross_l, intra_l, scene.phi_l,
                                             params.store["lidar.gate"])
        assert np.array_equal(star_l.data.data, ref_l.data.data)

        ctx_cr = blending.gather_camera_context(scene.phi_c, scene.cam_rgb,
                                                scene.phi_r.grid)
        cross_r = blending.windowed_attention(scene.phi_r, ctx_cr, "radar",
                                              params, "cross")
        ref_r = scene.phi_r.data.data + cross_r.data.data
        assert np.array_equal(star_r.data.data, ref_r)

    @pytest.mark.slow
    def test_end_to_end_param_gradients(self, rng):
        params = blending.BlendParams.init(CFG, seed=13)
        scene = random_scene(rng)
        ws = [rng.normal(size=(D,) + m.data.data.shape[1:])
              for m in (scene.phi_c, scene.phi_g, scene.phi_l, scene.phi_r)]

        def loss():
            outs = blending.blend_all(scene, params)
            total = ad.tsum(outs[0].data * ws[0])
            for o, w in zip(outs[1:], ws[1:]):
                total = total + ad.tsum(o.data * w)
            return total

        check_param_grads(loss, params.store)
