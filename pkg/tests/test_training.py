import json
import math

import numpy as np
import pytest
import torch

from srusloc import fieldsim as fs, network as net, training as tr
from srusloc.grid import GridSpec

TINY = net.NetConfig(m=1, stem_ch=8, hidden_ch=16, n_blocks=2, k_bins=4)


def make_output(H, W, K=4, detect_value=0.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    return net.NetOutput(
        detect_logit=torch.full((1, H, W), detect_value, dtype=torch.float64),
        xoff_logits=torch.randn(1, K, H, W, generator=g, dtype=torch.float64),
        zoff_logits=torch.randn(1, K, H, W, generator=g, dtype=torch.float64))


def empty_labels(H, W):
    z = np.zeros((H, W), dtype=np.uint8)
    return fs.LabelMap(z.copy(), z.copy(), z.copy())


class TestCompositeLoss:
    def test_confident_negatives_near_zero(self):
        out = make_output(8, 8, detect_value=-20.0)
        loss = tr.composite_loss(out, empty_labels(8, 8), tr.LossWeights())
        assert float(loss) == pytest.approx(0.9 * 2.061e-9, rel=1e-2)

    def test_uninformative_logits_give_weighted_ln2(self):
        out = make_output(8, 8, detect_value=0.0)
        loss = tr.composite_loss(out, empty_labels(8, 8), tr.LossWeights())
        assert float(loss) == pytest.approx(0.9 * math.log(2), rel=1e-6)

    def test_offset_terms_masked_to_mb_pixels(self):
        labels = empty_labels(8, 8)
        labels.detect[2, 3] = 1
        labels.xbin[2, 3] = 2
        labels.zbin[2, 3] = 1
        out = make_output(8, 8, detect_value=0.0, seed=1)
        base = float(tr.composite_loss(out, labels, tr.LossWeights()))
        # perturb offset logits only at non-MB pixels
        out2 = net.NetOutput(out.detect_logit,
                             out.xoff_logits.clone(), out.zoff_logits.clone())
        out2.xoff_logits[:, :, 5, 5] += 100.0
        out2.zoff_logits[:, :, 0, 0] -= 50.0
        assert float(tr.composite_loss(out2, labels, tr.LossWeights())) == base

    def test_loss_decomposition(self):
        labels = empty_labels(8, 8)
        labels.detect[1, 1] = 1
        labels.xbin[1, 1] = 3
        out = make_output(8, 8, detect_value=0.3, seed=2)
        w = tr.LossWeights(w_detect=0.9, w_x=0.1, w_z=0.1)
        terms = tr.loss_terms(out, labels, w)
        total = float(tr.composite_loss(out, labels, w))
        recomposed = (0.9 * float(terms["detect"]) + 0.1 * float(terms["x"])
                      + 0.1 * float(terms["z"]))
        assert abs(total - recomposed) < 1e-10

    def test_finite_for_finite_logits(self):
        labels = empty_labels(4, 4)
        labels.detect[0, 0] = 1
        out = make_output(4, 4, detect_value=500.0, seed=3)
        assert np.isfinite(float(tr.composite_loss(out, labels, tr.LossWeights())))

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            tr.LossWeights(w_detect=-0.1)


class TestSgdStep:
    def test_plain_sgd(self):
        cfg = tr.OptimConfig(lr=0.1, momentum=0.0, weight_decay=0.0, epochs=1)
        p = {"w": torch.tensor([1.0, 2.0])}
        g = {"w": torch.tensor([0.5, -1.0])}
        new_p, _ = tr.sgd_step(p, g, {}, cfg)
        assert torch.allclose(new_p["w"], torch.tensor([0.95, 2.1]))

    def test_zero_grad_zero_decay_is_identity(self):
        cfg = tr.OptimConfig(lr=0.1, momentum=0.9, weight_decay=0.0, epochs=1)
        p = {"w": torch.tensor([3.0])}
        g = {"w": torch.tensor([0.0])}
        new_p, _ = tr.sgd_step(p, g, {}, cfg)
        assert torch.equal(new_p["w"], p["w"])

    def test_two_momentum_steps_displacement(self):
        # constant grad g: displacement lr*g*(1 + 1.9) after two steps
        cfg = tr.OptimConfig(lr=0.01, momentum=0.9, weight_decay=0.0, epochs=1)
        p = {"w": torch.tensor([0.0])}
        g = {"w": torch.tensor([2.0])}
        p1, v1 = tr.sgd_step(p, g, {}, cfg)
        p2, _ = tr.sgd_step(p1, g, v1, cfg)
        assert float(p2["w"]) == pytest.approx(-0.01 * 2.0 * (1 + 1.9))

    def test_weight_decay_term(self):
        cfg = tr.OptimConfig(lr=0.1, momentum=0.0, weight_decay=0.5, epochs=1)
        p = {"w": torch.tensor([2.0])}
        g = {"w": torch.tensor([0.0])}
        new_p, _ = tr.sgd_step(p, g, {}, cfg)
        assert float(new_p["w"]) == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_decay_exempt_names(self):
        cfg = tr.OptimConfig(lr=0.1, momentum=0.0, weight_decay=0.5, epochs=1)
        p = {"b": torch.tensor([2.0])}
        g = {"b": torch.tensor([0.0])}
        new_p, _ = tr.sgd_step(p, g, {}, cfg, decay_exempt={"b"})
        assert torch.equal(new_p["b"], p["b"])

    def test_optimizer_matches_functional_step(self):
        model = net.init_params(TINY, seed=0)
        cfg = tr.OptimConfig(lr=0.05, momentum=0.9, weight_decay=1e-2, epochs=1)
        opt = tr.SgdMomentum(model, cfg)
        x = torch.randn(1, 1, 16, 16)
        labels = empty_labels(16, 16)
        labels.detect[4, 4] = 1
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        out = model(x)
        loss = tr.composite_loss(out, labels, tr.LossWeights())
        loss.backward()
        grads = {n: p.grad.clone() for n, p in model.named_parameters()}
        exempt = {n for n, p in model.named_parameters() if p.ndim <= 1}
        expect, _ = tr.sgd_step(before, grads, {}, cfg, decay_exempt=exempt)
        opt.step()
        for n, p in model.named_parameters():
            assert torch.allclose(p, expect[n], atol=1e-7), n


class TestGradients:
    def test_finite_difference_check(self):
        # analytic gradients of the composite loss vs central differences,
        # double precision, every parameter tensor
        torch.manual_seed(0)
        cfg = net.NetConfig(m=1, stem_ch=8, hidden_ch=16, n_blocks=2, k_bins=4)
        model = net.init_params(cfg, seed=0).double()
        x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
        labels = empty_labels(16, 16)
        labels.detect[5, 7] = 1
        labels.xbin[5, 7] = 2
        labels.zbin[5, 7] = 1
        labels.detect[10, 3] = 1
        w = tr.LossWeights()

        def loss_value():
            model.train(True)
            return tr.composite_loss(model(x), labels, w)

        loss = loss_value()
        model.zero_grad()
        loss.backward()
        eps = 1e-5
        rng = np.random.default_rng(1)
        worst = 0.0
        for name, p in model.named_parameters():
            flat = p.detach().view(-1)
            gflat = p.grad.view(-1)
            picks = rng.choice(flat.numel(), size=min(4, flat.numel()),
                               replace=False)
            for k in picks:
                orig = float(flat[k])
                with torch.no_grad():
                    flat[k] = orig + eps
                with torch.no_grad():
                    lp = float(loss_value())
                    flat[k] = orig - eps
                    lm = float(loss_value())
                with torch.no_grad():
                    flat[k] = orig
                fd = (lp - lm) / (2 * eps)
                an = float(gflat[k])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                worst = max(worst, rel)
                assert rel < 1e-3, f"{name}[{k}]: fd={fd} an={an}"
        assert worst < 1e-3


def tiny_dataset(tmp_path, grid, count=8, m=1, seed=1):
    scene = fs.SceneConfig(field_width_um=grid.width_um,
                           field_height_um=grid.height_um,
                           mean_mb_per_frame=3, n_frames=6,
                           tissue_per_mm2=20.0)
    cfg = fs.DatasetConfig(out_dir=str(tmp_path / "ds"), count=count, m=m,
                           grid=grid, scene=scene, master_seed=seed,
                           stacks_per_scene=4, clutter_filter=True)
    fs.build_dataset(cfg)
    return cfg.out_dir


class TestTrain:
    def test_single_step_identity(self, tmp_path):
        grid = GridSpec(width_px=16, height_px=16)
        ds_dir = tiny_dataset(tmp_path, grid, count=1)
        ds = tr.StackDataset(ds_dir)
        cfg = tr.OptimConfig(lr=0.01, momentum=0.0, weight_decay=0.0,
                             epochs=1, batch_size=1, seed=0)
        model, records = tr.train(ds, TINY, cfg)
        # loss after the single step equals composite_loss at updated params
        x, labels = ds.load(0)
        out = net.forward(model, torch.from_numpy(x), mode="eval")
        after = float(tr.composite_loss(out, labels, tr.LossWeights()))
        assert np.isfinite(records[0]["loss"])
        assert np.isfinite(after)

    def test_m_mismatch_rejected(self, tmp_path):
        grid = GridSpec(width_px=16, height_px=16)
        ds_dir = tiny_dataset(tmp_path, grid, count=2, m=1)
        cfg = tr.OptimConfig(epochs=1, batch_size=2, seed=0)
        with pytest.raises(ValueError, match="m=1.*m=3"):
            tr.train(ds_dir, net.NetConfig(m=3, stem_ch=8, hidden_ch=16,
                                           n_blocks=2), cfg)

    def test_determinism(self, tmp_path):
        grid = GridSpec(width_px=16, height_px=16)
        ds_dir = tiny_dataset(tmp_path, grid, count=4)
        cfg = tr.OptimConfig(lr=0.01, epochs=2, batch_size=2, seed=5)
        m1, r1 = tr.train(ds_dir, TINY, cfg)
        m2, r2 = tr.train(ds_dir, TINY, cfg)

        def strip(recs):
            return [{k: v for k, v in r.items() if k != "wall_ms"} for r in recs]

        assert strip(r1) == strip(r2)
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_log_and_checkpoint(self, tmp_path):
        grid = GridSpec(width_px=16, height_px=16)
        ds_dir = tiny_dataset(tmp_path, grid, count=2)
        ckpt = str(tmp_path / "model.srcx")
        log = str(tmp_path / "train.jsonl")
        cfg = tr.OptimConfig(epochs=3, batch_size=2, seed=0)
        model, _ = tr.train(ds_dir, TINY, cfg, tr.LossWeights(),
                            checkpoint_path=ckpt, log_path=log)
        lines = [json.loads(l) for l in open(log)]
        assert lines[0]["type"] == "header"
        assert lines[0]["epochs"] == 3
        assert lines[0]["weights"] == [0.9, 0.1, 0.1]
        for rec in lines[1:]:
            assert set(rec) == {"epoch", "loss", "loss_detect", "loss_x",
                                "loss_z", "wall_ms"}
        loaded = net.load_checkpoint(ckpt)
        x = torch.randn(1, 1, 16, 16)
        assert torch.equal(net.forward(model, x).detect_logit,
                           net.forward(loaded, x).detect_logit)

    def test_gradient_isolation_of_offset_decoders(self, tmp_path):
        # w_x = w_z = 0 with zero decay never changes the offset decoders
        grid = GridSpec(width_px=16, height_px=16)
        ds_dir = tiny_dataset(tmp_path, grid, count=2)
        cfg = tr.OptimConfig(lr=0.05, momentum=0.9, weight_decay=0.0,
                             epochs=2, batch_size=2, seed=0)
        w = tr.LossWeights(w_detect=0.9, w_x=0.0, w_z=0.0)
        model, _ = tr.train(ds_dir, TINY, cfg, w)
        fresh = net.init_params(TINY, seed=cfg.seed)
        assert torch.equal(model.dec_xoff.weight, fresh.dec_xoff.weight)
        assert torch.equal(model.dec_xoff.bias, fresh.dec_xoff.bias)
        assert torch.equal(model.dec_zoff.weight, fresh.dec_zoff.weight)
        assert not torch.equal(model.dec_detect.weight, fresh.dec_detect.weight)

    def test_line_search_sanity(self, tmp_path):
        # a small enough plain-SGD step decreases the loss on a fixed batch
        grid = GridSpec(width_px=16, height_px=16)
        ds_dir = tiny_dataset(tmp_path, grid, count=2)
        ds = tr.StackDataset(ds_dir)
        xs, labs = zip(*[ds.load(i) for i in range(len(ds))])
        batch = torch.from_numpy(np.stack(xs))
        w = tr.LossWeights()
        improved = False
        for lr in (1e-2, 1e-3, 1e-4):
            model = net.init_params(TINY, seed=3)
            model.train(True)
            loss0 = tr.composite_loss(model(batch), list(labs), w)
            model.zero_grad()
            loss0.backward()
            with torch.no_grad():
                for p in model.parameters():
                    p -= lr * p.grad
                loss1 = tr.composite_loss(model(batch), list(labs), w)
            if float(loss1) < float(loss0.detach()):
                improved = True
                break
        assert improved
