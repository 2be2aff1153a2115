import copy

import numpy as np
import pytest
import torch

from eyerefine import core, eyegen, refiner, segmenter
from eyerefine.core import (
    DivergenceDetected, EmptyBatch, EmptyDataset, MaskMismatch, RefinerConfig,
    ShapeError,
)
from eyerefine.percept import PerceptualNet

from conftest import STRONG_SHIFT, render_toys

TOY_CFG = dict(train_resolution=16, extractor_width=8, matting_eps=1e-8)


def toy_nets(seed=0, extractor=None, **over):
    cfg = RefinerConfig(seed=seed, **{**TOY_CFG, **over})
    ext = extractor or PerceptualNet(width=8, seed=2)
    return refiner.build_refiner(cfg, ext), cfg, ext


def small_samples(n, seed, shift=None):
    # render at 32 so the native image is exactly the enhancer resolution
    return render_toys(n, seed=seed, shift=shift, size=32)


class TestResampling:
    def test_area_resize_matches_segmenter(self):
        img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
        out = refiner.area_resize(img, 16, 16)
        ref = segmenter.area_resample(img.astype(np.float64), 16, 16)
        assert out.dtype == np.float32
        assert np.abs(out - ref).max() <= 1e-6

    def test_upsample2_doubles(self):
        t = torch.rand(1, 3, 7, 9)
        assert refiner.upsample2(t).shape == (1, 3, 14, 18)

    def test_reference_resample_shape(self):
        img = np.random.default_rng(1).random((48, 48, 3)).astype(np.float32)
        out = refiner.reference_resample(img, 16)
        assert out.shape == (32, 32, 3)


class TestIdentityContracts:
    def test_global_generator_identity(self):
        nets, _, _ = toy_nets()
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        out, feat = refiner.generate_global(nets.g1, img, 16)
        assert np.abs(out - img).max() <= 1e-6
        assert feat.shape[0] == nets.g1.head.in_channels

    def test_full_identity_against_resample(self):
        nets, _, _ = toy_nets()
        img = small_samples(1, seed=40)[0].image
        out = refiner.generate(nets, img)
        ref = refiner.reference_resample(img, 16)
        assert out.shape == ref.shape
        assert np.abs(out - ref).max() <= 1e-6

    def test_additive_enhancer_contract(self):
        # zero-init enhancer head: full output equals the upsampled
        # global output exactly
        nets, _, _ = toy_nets()
        s = small_samples(1, seed=41)[0]
        o2 = refiner.generate(nets, s.image, s.mask)
        o1, _ = refiner.generate_global(nets.g1, s.image, 16)
        up = refiner.upsample2(refiner._np_to_tensor(o1)[None])[0]
        assert np.abs(o2 - up.permute(1, 2, 0).numpy()).max() <= 1e-6

    def test_identity_at_non_multiple_resolution(self):
        nets, _, _ = toy_nets(train_resolution=18)
        img = render_toys(1, seed=42, size=36)[0].image
        out = refiner.generate(nets, img)
        ref = refiner.reference_resample(img, 18)
        assert np.abs(out - ref).max() <= 1e-6

    def test_generate_resamples_native_input(self):
        # a 64px native image is refined at the enhancer resolution 32
        nets, _, _ = toy_nets()
        img = render_toys(1, seed=43, size=64)[0].image
        out = refiner.generate(nets, img)
        assert out.shape == (32, 32, 3)


class TestDiscriminator:
    def test_zero_head_scores_zero(self):
        ext = PerceptualNet(width=8, seed=2)
        disc = refiner.Discriminator(ext, width=8, zero_head=True)
        img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
        scores = refiner.discriminate(disc, img)
        assert np.abs(scores).max() == 0.0

    def test_mask_changes_scores(self):
        ext = PerceptualNet(width=8, seed=2)
        disc = refiner.Discriminator(ext, width=8, seed=1)
        s = small_samples(1, seed=44)[0]
        a = refiner.discriminate(disc, s.image)
        b = refiner.discriminate(disc, s.image, s.mask)
        assert np.abs(a - b).max() > 1e-6

    def test_extractor_excluded_from_parameters(self):
        ext = PerceptualNet(width=8, seed=2)
        disc = refiner.Discriminator(ext, width=8)
        names = [n for n, _ in disc.named_parameters()]
        assert all("convs" not in n for n in names)

    def test_gan_objective_oracle(self):
        s_r = torch.tensor([0.9, 0.4])
        s_f = torch.tensor([0.2, -0.1])
        loss_d, loss_g = refiner.gan_objective(s_r, s_f)
        d_oracle = 0.5 * (((s_r - 1) ** 2).mean() + (s_f ** 2).mean())
        g_oracle = ((s_f - 1) ** 2).mean()
        assert float(loss_d) == pytest.approx(float(d_oracle), rel=1e-6)
        assert float(loss_g) == pytest.approx(float(g_oracle), rel=1e-6)

    def test_gan_objective_empty(self):
        with pytest.raises(EmptyBatch):
            refiner.gan_objective(torch.zeros(0), torch.zeros(0))


class TestSchedule:
    def test_from_config(self):
        cfg = RefinerConfig(stage1_iters=5, stage2_iters=6, stage3_iters=7,
                            step_size=1e-3)
        sched = refiner.StageSchedule.from_config(cfg)
        assert (sched.stage1_iters, sched.stage2_iters, sched.stage3_iters) == (5, 6, 7)
        assert sched.stage1_step == sched.stage2_step == 1e-3
        assert sched.stage3_step == pytest.approx(1e-4)

    def test_zero_schedule_is_noop(self):
        nets, cfg, ext = toy_nets()
        before = copy.deepcopy(nets.g1.state_dict())
        sched = refiner.StageSchedule(0, 0, 0)
        syn = small_samples(2, seed=45)
        rea = small_samples(2, seed=46, shift=STRONG_SHIFT)
        _, hist = refiner.train(nets, syn, rea, cfg, schedule=sched, extractor=ext)
        assert hist == []
        after = nets.g1.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)


class TestTraining:
    def make_sets(self, n=4):
        return (small_samples(n, seed=47),
                small_samples(n, seed=48, shift=STRONG_SHIFT))

    def test_empty_datasets(self):
        nets, cfg, ext = toy_nets()
        syn, rea = self.make_sets(2)
        with pytest.raises(EmptyDataset):
            refiner.train(nets, [], rea, cfg, extractor=ext)
        with pytest.raises(EmptyDataset):
            refiner.train(nets, syn, [], cfg, extractor=ext)

    def test_missing_masks_without_segmenter(self):
        nets, cfg, ext = toy_nets()
        syn, rea = self.make_sets(2)
        bare = [core.GazeSample.from_yaw_pitch(s.image, *s.yaw_pitch, s.domain)
                for s in syn]
        with pytest.raises(MaskMismatch):
            refiner.train(nets, bare, rea, cfg,
                          schedule=refiner.StageSchedule(1, 0, 0), extractor=ext)

    def test_adversarial_only_stage1(self):
        nets, cfg, ext = toy_nets(transfer_weight=0.0)
        syn, rea = self.make_sets(4)
        g1_before = copy.deepcopy(nets.g1.state_dict())
        d_before = copy.deepcopy(nets.disc.state_dict())
        _, hist = refiner.train(nets, syn, rea, cfg,
                                schedule=refiner.StageSchedule(50, 0, 0),
                                extractor=ext)
        assert len(hist) == 50
        assert all(np.isfinite(h["loss_D"]) for h in hist)
        assert all(h["terms"].total == 0.0 for h in hist)
        assert any(not torch.equal(g1_before[k], nets.g1.state_dict()[k])
                   for k in g1_before)
        assert any(not torch.equal(d_before[k], nets.disc.state_dict()[k])
                   for k in d_before)

    def test_null_objective_never_updates(self):
        nets, cfg, ext = toy_nets(transfer_weight=0.0, adv_weight=0.0)
        syn, rea = self.make_sets(2)
        before = {
            "g1": copy.deepcopy(nets.g1.state_dict()),
            "g2": copy.deepcopy(nets.g2.state_dict()),
            "d": copy.deepcopy(nets.disc.state_dict()),
        }
        _, hist = refiner.train(nets, syn, rea, cfg,
                                schedule=refiner.StageSchedule(3, 2, 2),
                                extractor=ext)
        assert len(hist) == 7
        assert all(torch.equal(before["g1"][k], nets.g1.state_dict()[k])
                   for k in before["g1"])
        assert all(torch.equal(before["g2"][k], nets.g2.state_dict()[k])
                   for k in before["g2"])
        assert all(torch.equal(before["d"][k], nets.disc.state_dict()[k])
                   for k in before["d"])

    def test_stage2_freezes_global_generator(self):
        nets, cfg, ext = toy_nets()
        syn, rea = self.make_sets(2)
        g1_before = copy.deepcopy(nets.g1.state_dict())
        g2_before = copy.deepcopy(nets.g2.state_dict())
        refiner.train(nets, syn, rea, cfg,
                      schedule=refiner.StageSchedule(0, 4, 0), extractor=ext)
        assert all(torch.equal(g1_before[k], nets.g1.state_dict()[k])
                   for k in g1_before)
        assert any(not torch.equal(g2_before[k], nets.g2.state_dict()[k])
                   for k in g2_before)

    def test_three_stage_smoke_with_outputs(self, tmp_path):
        nets, cfg, ext = toy_nets()
        syn, rea = self.make_sets(3)
        _, hist = refiner.train(nets, syn, rea, cfg,
                                schedule=refiner.StageSchedule(4, 3, 2),
                                out_dir=tmp_path, ckpt_every=4, extractor=ext)
        assert [h["stage"] for h in hist] == [1] * 4 + [2] * 3 + [3] * 2
        assert [h["iter"] for h in hist] == list(range(1, 10))
        assert (tmp_path / "losses.csv").exists()
        names = {p.name for p in (tmp_path / "refiner").iterdir()}
        assert "stage1_iter4.ckpt" in names
        assert "stage2_iter7.ckpt" in names
        assert "stage3_iter9.ckpt" in names
        with open(tmp_path / "losses.csv") as fh:
            assert len(fh.readlines()) == 10

    def test_deterministic_given_seed(self):
        ext = PerceptualNet(width=8, seed=2)
        runs = []
        for _ in range(2):
            nets, cfg, _ = toy_nets(seed=5, extractor=ext)
            syn, rea = self.make_sets(2)
            _, hist = refiner.train(nets, syn, rea, cfg,
                                    schedule=refiner.StageSchedule(3, 0, 0),
                                    extractor=ext)
            runs.append((nets, [h["loss_G"] for h in hist]))
        assert runs[0][1] == runs[1][1]
        s0 = runs[0][0].g1.state_dict()
        s1 = runs[1][0].g1.state_dict()
        assert all(torch.equal(s0[k], s1[k]) for k in s0)

    def test_divergence_detected(self):
        nets, cfg, ext = toy_nets()
        syn, rea = self.make_sets(2)
        with torch.no_grad():
            nets.disc.net[-1].bias.fill_(float("nan"))
        with pytest.raises(DivergenceDetected):
            refiner.train(nets, syn, rea, cfg,
                          schedule=refiner.StageSchedule(1, 0, 0), extractor=ext)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        nets, cfg, ext = toy_nets(seed=9)
        path = tmp_path / "refiner.ckpt"
        refiner.save_refiner(nets, path)
        loaded = refiner.load_refiner(path, extractor=ext)
        assert loaded.resolution == nets.resolution
        for part in ("g1", "g2", "disc"):
            a = getattr(nets, part).state_dict()
            b = getattr(loaded, part).state_dict()
            assert set(a) == set(b)
            assert all(torch.equal(a[k], b[k]) for k in a)

    def test_load_rebuilds_extractor(self, tmp_path):
        nets, _, _ = toy_nets(seed=9)
        path = tmp_path / "refiner.ckpt"
        refiner.save_refiner(nets, path)
        loaded = refiner.load_refiner(path)
        img = small_samples(1, seed=49)[0].image
        assert np.array_equal(refiner.generate(nets, img),
                              refiner.generate(loaded, img))

    def test_refine_batch_preserves_labels(self, tmp_path):
        data_dir = tmp_path / "data"
        manifest = eyegen.generate_dataset(3, 0.5, None, str(data_dir),
                                           seed=7, size=32)
        nets, _, _ = toy_nets()
        out_dir = tmp_path / "refined"
        out_manifest = refiner.refine_batch(nets, manifest, str(out_dir))
        in_rows = core.read_manifest(manifest)
        out_rows = core.read_manifest(out_manifest)
        assert len(out_rows) == len(in_rows)
        for rin, rout in zip(in_rows, out_rows):
            assert rout["yaw_deg"] == rin["yaw_deg"]
            assert rout["pitch_deg"] == rin["pitch_deg"]
            assert rout["domain"] == "refined"
            assert rout["image_path"].startswith("refined_")
            img = core.load_image(str(out_dir / rout["image_path"]))
            assert img.shape == (32, 32, 3)
            if rin["mask_path"]:
                mask = core.load_mask(str(out_dir / rout["mask_path"]))
                assert mask.shape == (32, 32)
