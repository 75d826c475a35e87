"""Acceptance gate: ten behavior suites, one printed verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
Each test covers one contract of the package; tolerances are pinned in the
assertions, not configurable.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
from PIL import Image
from skimage import measure

from style3d.attention import (
    AttnConfig,
    FeatureKind,
    FeatureTensor,
    attention_weights,
    fuse_attention,
    row_entropies,
)
from style3d.cameras import Camera
from style3d.errors import BackendError
from style3d.meshing import SdfGrid, extract_mesh, flexi_regularizer
from style3d.mvdiff.backend import load_backend
from style3d.mvdiff.ops import capture_features, ddpm_invert, generate_multiview, generate_native
from style3d.pipeline import RunConfig, run_pipeline
from style3d.recon.data import PosedViewBatch
from style3d.recon.losses import loss_stage1, loss_stage2
from style3d.recon.training import TrainSchedule, train_loop
from style3d.recon.triplane import DirectTriplaneModel, ReconConfig


class _Gate:
    """Prints one [PASS]/[FAIL] line per acceptance suite."""

    def __init__(self, label):
        self.label = label

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            verdict = "[PASS]"
        elif issubclass(exc_type, pytest.skip.Exception):
            verdict = "[SKIP]"
        else:
            verdict = "[FAIL]"
        print(f"\n{verdict} {self.label}")
        return False


def _ft(data, kind=FeatureKind.QUERY, layer="up_blocks.3.attentions.1.transformer_blocks.0.attn2", t=5):
    return FeatureTensor(torch.as_tensor(data, dtype=torch.float64), layer, t, kind)


def _scalar_fused(q_c, q_c_p, k_s, v_s, beta, lam):
    n, d = len(q_c), len(q_c[0])
    m, dv = len(k_s), len(v_s[0])
    out = [[0.0] * dv for _ in range(n)]
    for i in range(n):
        q = [beta[0] * q_c[i][j] + beta[1] * q_c_p[i][j] for j in range(d)]
        logits = []
        for a in range(m):
            dot = sum(q[j] * k_s[a][j] for j in range(d))
            logits.append(lam * dot / math.sqrt(d))
        mx = max(logits)
        ex = [math.exp(x - mx) for x in logits]
        z = sum(ex)
        for c in range(dv):
            out[i][c] = sum(e / z * v_s[a][c] for a, e in enumerate(ex))
    return out


def _checker(seed, size=32):
    gen = np.random.default_rng(seed)
    blocks = gen.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    return np.kron(blocks, np.ones((size // 4, size // 4, 1), dtype=np.uint8))


@pytest.fixture()
def accept_images(tmp_path):
    paths = []
    for name, seed in (("content", 11), ("style", 22)):
        p = tmp_path / f"{name}.png"
        Image.fromarray(_checker(seed)).save(p)
        paths.append(str(p))
    return tuple(paths)


def test_fused_attention_matches_scalar_reference_on_1000_instances():
    with _Gate("fused attention equals the scalar reference on 1000 random "
               "instances (<= 1e-6 relative, under 10 s)"):
        t0 = time.perf_counter()
        gen = torch.Generator().manual_seed(2024)
        worst = 0.0
        for _ in range(1000):
            n = int(torch.randint(1, 9, (1,), generator=gen))
            m = int(torch.randint(1, 9, (1,), generator=gen))
            d = int(torch.randint(1, 9, (1,), generator=gen))
            dv = int(torch.randint(1, 9, (1,), generator=gen))
            bc = float(torch.rand(1, generator=gen))
            lam = 0.25 + 3.75 * float(torch.rand(1, generator=gen))
            q_c = torch.randn(n, d, generator=gen, dtype=torch.float64)
            q_p = torch.randn(n, d, generator=gen, dtype=torch.float64)
            k_s = torch.randn(m, d, generator=gen, dtype=torch.float64)
            v_s = torch.randn(m, dv, generator=gen, dtype=torch.float64)
            cfg = AttnConfig(beta=(bc, 1.0 - bc), lambda_scale=lam)
            got = fuse_attention(
                _ft(q_c), _ft(q_p, FeatureKind.QUERY_PRESERVE),
                _ft(k_s, FeatureKind.KEY), _ft(v_s, FeatureKind.VALUE),
                cfg, timestep=1,
            ).data
            want = torch.tensor(
                _scalar_fused(q_c.tolist(), q_p.tolist(), k_s.tolist(),
                              v_s.tolist(), (bc, 1.0 - bc), lam),
                dtype=torch.float64,
            )
            rel = float((got - want).abs().max() / want.abs().max().clamp_min(1e-12))
            worst = max(worst, rel)
            assert rel <= 1e-6, f"relative error {rel:.3e}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0, f"oracle sweep took {elapsed:.1f} s"


def test_disabled_fusion_with_content_bank_is_bit_transparent():
    with _Gate("generation with beta=(1,0), lambda=1 and a content-derived "
               "bank is bit-identical to the plain sampler (under 30 s)"):
        t0 = time.perf_counter()
        backend = load_backend("toy")
        content = _checker(11)
        cfg = AttnConfig(beta=(1.0, 0.0), lambda_scale=1.0)
        traj = ddpm_invert(content, backend, steps=65)
        bank = capture_features(traj, backend, cfg, role="style")
        fused = generate_multiview(content, bank, backend, cfg, seed=42,
                                   trajectory=traj)
        native = generate_native(content, backend, steps=65, seed=42,
                                 trajectory=traj)
        assert np.array_equal(fused.tile, native.tile)
        assert all(np.array_equal(a, b) for a, b in zip(fused.views, native.views))
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"transparency check took {elapsed:.1f} s"


def test_attention_degeneracies_hold_at_stated_tolerances():
    with _Gate("blend endpoints are exact, attention rows are stochastic, "
               "the operator is linear in values, and sharpening never "
               "raises row entropy"):
        gen = torch.Generator().manual_seed(7)
        q = torch.randn(6, 5, generator=gen, dtype=torch.float64)
        p1 = torch.randn(6, 5, generator=gen, dtype=torch.float64)
        p2 = torch.randn(6, 5, generator=gen, dtype=torch.float64)
        k = torch.randn(7, 5, generator=gen, dtype=torch.float64)
        v = torch.randn(7, 4, generator=gen, dtype=torch.float64)
        v2 = torch.randn(7, 4, generator=gen, dtype=torch.float64)

        # beta endpoints ignore the other query bitwise
        cfg_c = AttnConfig(beta=(1.0, 0.0), lambda_scale=1.3)
        out1 = fuse_attention(_ft(q), _ft(p1, FeatureKind.QUERY_PRESERVE),
                              _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE),
                              cfg_c, timestep=2).data
        out2 = fuse_attention(_ft(q), _ft(p2, FeatureKind.QUERY_PRESERVE),
                              _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE),
                              cfg_c, timestep=2).data
        assert torch.equal(out1, out2)
        cfg_p = AttnConfig(beta=(0.0, 1.0), lambda_scale=1.3)
        outp1 = fuse_attention(_ft(q), _ft(p1, FeatureKind.QUERY_PRESERVE),
                               _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE),
                               cfg_p, timestep=2).data
        outp2 = fuse_attention(_ft(2.0 * q), _ft(p1, FeatureKind.QUERY_PRESERVE),
                               _ft(k, FeatureKind.KEY), _ft(v, FeatureKind.VALUE),
                               cfg_p, timestep=2).data
        assert torch.equal(outp1, outp2)

        # row-stochastic weights: all-ones values come back as all ones
        cfg = AttnConfig(beta=(0.4, 0.6), lambda_scale=1.5)
        ones = torch.ones(7, 4, dtype=torch.float64)
        out_ones = fuse_attention(_ft(q), _ft(p1, FeatureKind.QUERY_PRESERVE),
                                  _ft(k, FeatureKind.KEY),
                                  _ft(ones, FeatureKind.VALUE),
                                  cfg, timestep=2).data
        assert float((out_ones - 1.0).abs().max()) <= 1e-6
        w = attention_weights(q, k, 1.5 / math.sqrt(5))
        assert float((w.sum(dim=-1) - 1.0).abs().max()) <= 1e-6

        # linearity in the value matrix
        def fuse_v(vv):
            return fuse_attention(_ft(q), _ft(p1, FeatureKind.QUERY_PRESERVE),
                                  _ft(k, FeatureKind.KEY),
                                  _ft(vv, FeatureKind.VALUE),
                                  cfg, timestep=2).data

        lhs = fuse_v(2.5 * v + v2)
        rhs = 2.5 * fuse_v(v) + fuse_v(v2)
        rel = float((lhs - rhs).abs().max() / rhs.abs().max().clamp_min(1e-12))
        assert rel <= 1e-6

        # entropy is non-increasing in the attention scale
        prev = None
        for lam in (0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0):
            ent = float(row_entropies(
                attention_weights(q, k, lam / math.sqrt(5))
            ).mean())
            if prev is not None:
                assert ent <= prev + 1e-9, (lam, ent, prev)
            prev = ent


def test_zero_prediction_round_trips_are_exact():
    with _Gate("inversion followed by denoising with a zero-prediction "
               "network reconstructs the input within 1e-5 for 1, 2, 4 and "
               "8 steps"):
        backend = load_backend("toy", noise_net="zero")
        content = _checker(11)
        for steps in (1, 2, 4, 8):
            traj = ddpm_invert(content, backend, steps=steps)
            back = backend.run_denoise(traj.latents[-1], traj.schedule,
                                       traj.conditioning)
            err = float((back - traj.latents[0]).abs().max())
            assert err <= 1e-5, f"steps={steps}: round-trip error {err:.2e}"


def _fd_slope(fn, leaf, index, h=1e-6):
    with torch.no_grad():
        orig = float(leaf[index])
        leaf[index] = orig + h
        up = fn()
        leaf[index] = orig - h
        dn = fn()
        leaf[index] = orig
    return (up - dn) / (2.0 * h)


def test_loss_and_regularizer_gradients_match_finite_differences():
    with _Gate("stage losses and the extraction regularizer agree with "
               "central finite differences within 1e-4 relative, and the "
               "default weights read back exactly"):
        gen = torch.Generator().manual_seed(41)

        def rasters():
            rgb = torch.rand(1, 6, 6, 3, generator=gen, dtype=torch.float64)
            mask = (torch.rand(1, 6, 6, generator=gen, dtype=torch.float64) > 0.3).to(torch.float64)
            depth = torch.rand(1, 6, 6, generator=gen, dtype=torch.float64) * 3.0
            normal = torch.nn.functional.normalize(
                torch.randn(1, 6, 6, 3, generator=gen, dtype=torch.float64), dim=-1)
            return {"rgb": rgb, "mask": mask, "depth": depth, "normal": normal}

        gt = rasters()
        rep1 = loss_stage1({k: v.clone() for k, v in gt.items()}, gt)
        assert rep1.weights == {"image": 1.0, "lpips": 2.0, "mask": 1.0}

        rgb = (gt["rgb"] + 0.05).clamp(0, 1).requires_grad_(True)
        mask = torch.full_like(gt["mask"], 0.4).requires_grad_(True)
        value1 = lambda: float(loss_stage1({"rgb": rgb, "mask": mask}, gt).total)
        loss_stage1({"rgb": rgb, "mask": mask}, gt).total.backward()
        for leaf, coords in ((rgb, [(0, 1, 2, 0), (0, 4, 4, 2), (0, 0, 5, 1)]),
                             (mask, [(0, 2, 2), (0, 5, 0)])):
            for c in coords:
                num = _fd_slope(value1, leaf, c)
                ana = float(leaf.grad[c])
                assert ana == pytest.approx(num, rel=1e-4, abs=1e-8), (c, ana, num)

        gt2 = rasters()
        gt2["mask"] = torch.ones_like(gt2["mask"])
        rgb2 = gt2["rgb"].clone().requires_grad_(True)
        depth2 = (gt2["depth"] + 0.3).requires_grad_(True)
        raw_n = (gt2["normal"] + 0.2 * torch.randn(1, 6, 6, 3, generator=gen,
                 dtype=torch.float64)).requires_grad_(True)
        reg = torch.tensor(0.4, dtype=torch.float64, requires_grad=True)

        def rep2():
            pred = {"rgb": rgb2, "mask": gt2["mask"], "depth": depth2,
                    "normal": torch.nn.functional.normalize(raw_n, dim=-1),
                    "reg": reg.clamp_min(0.0)}
            return loss_stage2(pred, gt2)

        report2 = rep2()
        assert report2.weights == {"image": 1.0, "lpips": 2.0, "mask": 1.0,
                                   "depth": 0.5, "normal": 0.2, "reg": 0.01}
        report2.total.backward()
        value2 = lambda: float(rep2().total)
        for leaf, coords in ((depth2, [(0, 1, 1), (0, 4, 2)]),
                             (raw_n, [(0, 2, 3, 0), (0, 5, 5, 2)]),
                             (rgb2, [(0, 3, 3, 1)])):
            for c in coords:
                num = _fd_slope(value2, leaf, c)
                ana = float(leaf.grad[c])
                assert ana == pytest.approx(num, rel=1e-4, abs=1e-8), (c, ana, num)
        assert float(reg.grad) == pytest.approx(0.01, rel=1e-9)

        res = 7
        axis = torch.linspace(-1.0, 1.0, res, dtype=torch.float64)
        gi, gj, gk = torch.meshgrid(axis, axis, axis, indexing="ij")
        values = 0.5 - torch.sqrt(gi**2 + gj**2 + gk**2)
        cell = 2.0 / (res - 1)
        deform = (0.1 * cell * torch.randn(res, res, res, 3, generator=gen,
                  dtype=torch.float64)).clamp(-0.4 * cell, 0.4 * cell).requires_grad_(True)
        alpha = (1.0 + 0.2 * torch.rand(res - 1, res - 1, res - 1, 8,
                 generator=gen, dtype=torch.float64)).requires_grad_(True)
        beta = (1.0 + 0.2 * torch.rand(res - 1, res - 1, res - 1, 12,
                generator=gen, dtype=torch.float64)).requires_grad_(True)

        def reg_value():
            grid = SdfGrid(values=values, deformations=deform, alpha=alpha,
                           beta=beta, cell=cell)
            return flexi_regularizer(grid)

        reg_value().backward()
        value3 = lambda: float(reg_value())
        for leaf, coords in ((deform, [(1, 2, 3, 0), (4, 4, 4, 2)]),
                             (alpha, [(0, 1, 2, 3)]),
                             (beta, [(2, 2, 2, 7)])):
            for c in coords:
                num = _fd_slope(value3, leaf, c, h=1e-7)
                ana = float(leaf.grad[c])
                assert ana == pytest.approx(num, rel=1e-4, abs=1e-8), (c, ana, num)


def test_sphere_extraction_is_watertight_and_analytically_accurate():
    with _Gate("a radius-0.5 sphere extracts watertight with Euler "
               "characteristic 2, volume within 2% and area within 3%, and "
               "neutral extraction stays within one cell diagonal of a "
               "marching-cubes oracle on 5 random smooth fields (under 60 s)"):
        t0 = time.perf_counter()
        res = 33
        extent = 0.6
        axis = torch.linspace(-extent, extent, res)
        gi, gj, gk = torch.meshgrid(axis, axis, axis, indexing="ij")
        values = 0.5 - torch.sqrt(gi**2 + gj**2 + gk**2)
        grid = SdfGrid.neutral(values, origin=(-extent,) * 3,
                               cell=2.0 * extent / (res - 1))
        stats = extract_mesh(grid).stats
        assert stats.watertight, stats.defects
        assert stats.euler_characteristic == 2
        want_vol = 4.0 / 3.0 * math.pi * 0.5**3
        want_area = 4.0 * math.pi * 0.5**2
        assert abs(stats.volume - want_vol) / want_vol <= 0.02
        assert abs(stats.area - want_area) / want_area <= 0.03

        mc_res = 24
        mc_cell = 2.0 / (mc_res - 1)
        bound = mc_cell * math.sqrt(3.0)
        ax = torch.linspace(-1.0, 1.0, mc_res)
        bi, bj, bk = torch.meshgrid(ax, ax, ax, indexing="ij")
        r = torch.sqrt(bi**2 + bj**2 + bk**2)
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            coeff = torch.rand(6, generator=g)
            a, b, c = (1.0 + 2.0 * coeff[:3]).tolist()
            p1, p2, p3 = (2 * math.pi * coeff[3:]).tolist()
            field = (0.35 - r
                     + 0.12 * torch.sin(a * bi + p1) * torch.cos(b * bj + p2)
                     + 0.08 * torch.sin(c * bk + p3))
            ours = extract_mesh(SdfGrid.neutral(field, cell=mc_cell))
            assert ours.vertices.shape[0] > 0
            mc_v, _, _, _ = measure.marching_cubes(field.numpy(), level=0.0,
                                                   spacing=(mc_cell,) * 3)
            mc = torch.from_numpy(mc_v.copy()).float() - 1.0
            worst = float(torch.cdist(ours.vertices, mc).min(dim=1).values.max())
            assert worst <= bound, f"seed {seed}: {worst:.4f} > {bound:.4f}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0, f"extraction suite took {elapsed:.1f} s"


def test_single_view_overfit_collapses_stage1_loss_tenfold():
    with _Gate("200 fitting steps on one synthetic view cut the stage-1 "
               "loss at least 10x, with lr(0) exactly 4.0e-5 and a "
               "non-increasing cosine trace"):
        cam = Camera(elevation_deg=20.0, azimuth_deg=30.0, radius=2.5,
                     fov_deg=12.0, width=32, height=32)
        images = torch.tensor([0.8, 0.3, 0.2]).expand(1, 32, 32, 3).contiguous()
        batch = PosedViewBatch(images=images, masks=torch.ones(1, 32, 32),
                               cameras=(cam,))
        model = DirectTriplaneModel(ReconConfig(seed=0))
        result = train_loop(model, batch, TrainSchedule(stage1_steps=200))
        first = result.history[0]["total"]
        last = result.history[-1]["total"]
        assert first / max(last, 1e-12) >= 10.0, (first, last)
        assert result.lrs[0] == 4.0e-5
        assert all(a >= b for a, b in zip(result.lrs, result.lrs[1:]))
        assert len(result.lrs) == 200


def test_default_pipeline_is_byte_identical_across_processes(accept_images, tmp_path):
    with _Gate("two separate processes running the default seed-42 toy "
               "pipeline produce byte-identical views.png, mesh.obj and "
               "report.json"):
        content, style = accept_images
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            proc = subprocess.run(
                [sys.executable, "-m", "style3d.cli", "run",
                 "--content", content, "--style", style, "--out", str(out)],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
            run_dirs = list(out.iterdir())
            assert len(run_dirs) == 1
            outs.append(run_dirs[0])
        for name in ("views.png", "mesh.obj", "report.json"):
            ba = (outs[0] / name).read_bytes()
            bb = (outs[1] / name).read_bytes()
            assert ba == bb, f"{name} differs between processes"


def test_stub_eval_reports_are_reproducible_and_bounded(tmp_path):
    with _Gate("stub-embedder eval reports byte-reproducible, identical "
               "pairs score >= 0.999, and 100 random cases stay inside "
               "[-1, 1]"):
        from style3d.evaluation import (
            EvalCase, StubEmbedder, eval_run, image_image_scores,
        )

        gen = torch.Generator().manual_seed(77)
        cases = []
        for i, color in enumerate([(0.9, 0.2, 0.2), (0.2, 0.4, 0.9)]):
            base = torch.tensor(color).expand(16, 16, 3)
            views = tuple(
                (base + 0.02 * torch.rand(16, 16, 3, generator=gen)).clamp(0, 1)
                for _ in range(6)
            )
            cases.append(EvalCase(case_id=f"c{i}", prompt="a red sculpture",
                                  content_image=base.contiguous(), views=views))
        r1 = eval_run(cases, out_dir=str(tmp_path / "r1"))
        r2 = eval_run(cases, out_dir=str(tmp_path / "r2"))
        for name in ("report.json", "report.csv"):
            b1 = (tmp_path / "r1" / name).read_bytes()
            b2 = (tmp_path / "r2" / name).read_bytes()
            assert b1 == b2, name
        assert r1.mean_text_image == r2.mean_text_image

        img = torch.rand(16, 16, 3, generator=gen)
        same = image_image_scores([img.clone()], img)[0]
        assert same >= 0.999

        emb = StubEmbedder()
        for _ in range(100):
            a = torch.rand(8, 8, 3, generator=gen)
            b = torch.rand(8, 8, 3, generator=gen)
            s = image_image_scores([a], b, emb)[0]
            assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


def test_pretrained_weight_gate_fails_loudly_or_runs_end_to_end(accept_images, tmp_path, monkeypatch):
    with _Gate("the pretrained backend refuses to run without configured "
               "weights and completes end to end (wall time recorded) when "
               "they are present"):
        content, style = accept_images

        monkeypatch.delenv("STYLE3D_CACHE", raising=False)
        with pytest.raises(BackendError):
            load_backend("pretrained")
        out = tmp_path / "no_weights"
        cfg = RunConfig(content=content, style=style, backend="pretrained",
                        steps=4, out_dir=str(out))
        with pytest.raises(BackendError):
            run_pipeline(cfg)
        assert not out.exists()
        proc = subprocess.run(
            [sys.executable, "-m", "style3d.cli", "run", "--content", content,
             "--style", style, "--backend", "pretrained", "--steps", "4",
             "--out", str(tmp_path / "cli_no_weights")],
            capture_output=True, text=True,
            env={k: v for k, v in os.environ.items() if k != "STYLE3D_CACHE"},
        )
        assert proc.returncode == 3, (proc.returncode, proc.stderr)
        assert "backend error" in proc.stderr
        assert not (tmp_path / "cli_no_weights").exists()

        cache = os.environ.get("STYLE3D_CACHE", "")
        if not cache or not os.path.isdir(cache):
            print("\n  pretrained weights not configured; full run not exercised")
            return
        monkeypatch.setenv("STYLE3D_CACHE", cache)
        t0 = time.perf_counter()
        rep = run_pipeline(RunConfig(content=content, style=style,
                                     backend="pretrained",
                                     out_dir=str(tmp_path / "weighted")))
        wall = time.perf_counter() - t0
        print(f"\n  pretrained end-to-end wall time: {wall:.1f} s")
        for name in ("views.png", "mesh.obj", "mesh.glb", "report.json"):
            assert os.path.isfile(os.path.join(rep.out_dir, name))
