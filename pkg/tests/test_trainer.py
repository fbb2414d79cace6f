import json

import numpy as np
import pytest
import torch

from bodyreshape import generator as gen
from bodyreshape import trainer
from bodyreshape.errors import InvalidInputError
from bodyreshape.warpfield import identity_field

from conftest import make_scene


class TestRecoveryLoss:
    def test_identical_zero(self):
        x = torch.randn(2, 3, 8, 8)
        assert float(trainer.recovery_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = torch.zeros(1, 3, 8, 8)
        y = torch.full((1, 3, 8, 8), 0.5)
        assert abs(float(trainer.recovery_loss(x, y)) - 0.5) < 1e-7

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 5, 3))
        b = rng.standard_normal((4, 5, 3))
        total = 0.0
        for y in range(4):
            for x in range(5):
                for c in range(3):
                    total += abs(a[y, x, c] - b[y, x, c])
        oracle = total / (4 * 5 * 3)
        assert abs(trainer.recovery_loss(a, b) - oracle) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            trainer.recovery_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestHingeLosses:
    def test_margin_satisfied(self):
        l_g, l_d = trainer.hinge_losses(np.ones((3, 3)), -np.ones((3, 3)))
        assert l_d == 0.0

    def test_zero_scores_closed_form(self):
        l_g, l_d = trainer.hinge_losses(np.zeros((2, 2)), np.zeros((2, 2)))
        assert l_d == 2.0 and l_g == 0.0

    def test_random_maps_match_formula_oracle(self):
        rng = np.random.default_rng(1)
        real = rng.standard_normal((6, 6))
        fake = rng.standard_normal((6, 6))
        l_g, l_d = trainer.hinge_losses(real, fake)
        oracle_d = np.clip(1 - real, 0, None).mean() + np.clip(1 + fake, 0, None).mean()
        oracle_g = -fake.mean()
        assert abs(l_d - oracle_d) < 1e-7 and abs(l_g - oracle_g) < 1e-7

    def test_torch_agrees_with_numpy(self):
        rng = np.random.default_rng(2)
        real = rng.standard_normal((4, 4))
        fake = rng.standard_normal((4, 4))
        tg, td = trainer.hinge_losses(torch.from_numpy(real), torch.from_numpy(fake))
        ng, nd = trainer.hinge_losses(real, fake)
        assert abs(float(tg) - ng) < 1e-7 and abs(float(td) - nd) < 1e-7


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            trainer.TrainConfig(lr_generator=0.0)
        with pytest.raises(InvalidInputError):
            trainer.TrainConfig(variant="X+")

    def test_empty_manifest_rejected(self, model, tmp_path):
        with pytest.raises(InvalidInputError):
            trainer.train([], trainer.TrainConfig(), tmp_path, model)


def _loss_and_grads(g, d, batch, lam_r, lam_g):
    out = g(batch["i_f"], batch["i_b"], batch["a"], batch["grids"], batch["fg_mask"])
    i_t = gen.composite(batch["target"], out, batch["a"])
    l_r = trainer.recovery_loss(batch["target"], i_t)
    l_g = -d(i_t).mean()
    loss = lam_r * l_r + lam_g * l_g
    grads = torch.autograd.grad(loss, [p for p in g.parameters() if p.requires_grad], allow_unused=True)
    return [x if x is not None else torch.zeros(1) for x in grads]


@pytest.fixture(scope="module")
def tiny_batch(model):
    from bodyreshape.selfsup import TripletFactory

    records = [make_scene(model, seed=s, resolution=64) for s in (400, 401)]
    factory = TripletFactory(model)
    torch.manual_seed(0)
    g = gen.Generator(gen.GeneratorConfig(input_resolution=64))
    batcher = trainer.TripletBatcher(g, 64)
    batch = batcher.collate([factory.make(r, i) for i, r in enumerate(records)])
    return g, batch


@pytest.fixture
def single_thread():
    # scatter-add in the warp's backward is order-nondeterministic across threads
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


class TestLossDecomposition:
    def test_zero_gan_weight_equals_pure_l1_gradient(self, tiny_batch, single_thread):
        g, batch = tiny_batch
        torch.manual_seed(1)
        d = gen.PatchDiscriminator()
        grads_no_gan = _loss_and_grads(g, d, batch, 100.0, 0.0)

        out = g(batch["i_f"], batch["i_b"], batch["a"], batch["grids"], batch["fg_mask"])
        i_t = gen.composite(batch["target"], out, batch["a"])
        pure = 100.0 * trainer.recovery_loss(batch["target"], i_t)
        grads_pure = torch.autograd.grad(pure, [p for p in g.parameters() if p.requires_grad], allow_unused=True)
        grads_pure = [x if x is not None else torch.zeros(1) for x in grads_pure]
        for a, b in zip(grads_no_gan, grads_pure):
            assert torch.allclose(a, b, atol=1e-7)

    def test_recovery_weight_scales_gradient_exactly(self, tiny_batch, single_thread):
        g, batch = tiny_batch
        out = g(batch["i_f"], batch["i_b"], batch["a"], batch["grids"], batch["fg_mask"])
        i_t = gen.composite(batch["target"], out, batch["a"])
        l_r = trainer.recovery_loss(batch["target"], i_t)
        params = [p for p in g.parameters() if p.requires_grad]
        g1 = torch.autograd.grad(100.0 * l_r, params, retain_graph=True, allow_unused=True)
        g3 = torch.autograd.grad(300.0 * l_r, params, allow_unused=True)
        # compare whole parameter vectors: conv biases feeding instance norm
        # have mathematically zero gradients, so elementwise values there are
        # float cancellation noise that cannot scale
        a = torch.cat([x.reshape(-1) for x in g1 if x is not None])
        b = torch.cat([x.reshape(-1) for x in g3 if x is not None])
        assert float((3.0 * a - b).norm()) <= 1e-4 * float(b.norm())


class TestTrainLoop:
    @pytest.fixture(scope="class")
    def run_dir(self, model, tmp_path_factory):
        records = [make_scene(model, seed=s, resolution=64) for s in (410, 411, 412, 413)]
        out = tmp_path_factory.mktemp("train_run")
        cfg = trainer.TrainConfig(
            epochs=2, batch_size=2, seed=3, resolution=64, max_steps=4, resample_per_epoch=False
        )
        ck = trainer.train(records, cfg, out, model)
        return out, ck, records, cfg

    def test_checkpoint_loadable_and_metrics_written(self, run_dir):
        out, ck, _, _ = run_dir
        g = gen.load_checkpoint(ck)
        assert g.config.fingerprint() == gen.variant_config("full", 64).fingerprint()
        metrics = trainer.read_metrics(out)
        assert len(metrics) == 4
        assert all(np.isfinite([m["l_r"], m["l_g"], m["l_d"]]).all() for m in metrics)

    def test_optimizer_partition(self, model, tmp_path):
        # one D step + one G step must not cross-contaminate parameters
        records = [make_scene(model, seed=s, resolution=64) for s in (420, 421)]
        from bodyreshape.selfsup import TripletFactory

        torch.manual_seed(0)
        g = gen.Generator(gen.GeneratorConfig(input_resolution=64))
        d = gen.PatchDiscriminator()
        factory = TripletFactory(model)
        batch = trainer.TripletBatcher(g, 64).collate([factory.make(records[0], 0)])
        g_before = [p.detach().clone() for p in g.parameters()]
        d_before = [p.detach().clone() for p in d.parameters()]

        opt_d = torch.optim.Adam(d.parameters(), lr=4e-4)
        out = g(batch["i_f"], batch["i_b"], batch["a"], batch["grids"], batch["fg_mask"])
        i_t = gen.composite(batch["target"], out, batch["a"])
        _, l_d = trainer.hinge_losses(d(batch["target"]), d(i_t.detach()))
        opt_d.zero_grad()
        l_d.backward()
        opt_d.step()
        for p0, p1 in zip(g_before, g.parameters()):
            assert torch.equal(p0, p1)  # D step leaves G untouched

        d_mid = [p.detach().clone() for p in d.parameters()]
        opt_g = torch.optim.Adam(g.parameters(), lr=1e-4)
        out = g(batch["i_f"], batch["i_b"], batch["a"], batch["grids"], batch["fg_mask"])
        i_t = gen.composite(batch["target"], out, batch["a"])
        loss_g = 100.0 * trainer.recovery_loss(batch["target"], i_t) - 10.0 * d(i_t).mean()
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()
        for p0, p1 in zip(d_mid, d.parameters()):
            assert torch.equal(p0, p1)  # G step leaves D untouched

    def test_seeded_reproducibility(self, model, tmp_path):
        records = [make_scene(model, seed=s, resolution=64) for s in (430, 431)]
        cfg = trainer.TrainConfig(epochs=1, batch_size=2, seed=11, resolution=64, max_steps=2)
        trainer.train(records, cfg, tmp_path / "a", model)
        trainer.train(records, cfg, tmp_path / "b", model)
        ma = trainer.read_metrics(tmp_path / "a")
        mb = trainer.read_metrics(tmp_path / "b")
        for x, y in zip(ma, mb):
            assert abs(x["l_r"] - y["l_r"]) <= 1e-4
            assert abs(x["l_d"] - y["l_d"]) <= 1e-4

    def test_ablation_variant_trains_and_loads(self, model, tmp_path):
        records = [make_scene(model, seed=s, resolution=64) for s in (440, 441)]
        cfg = trainer.TrainConfig(epochs=1, batch_size=2, seed=0, resolution=64, max_steps=1, variant="C-")
        ck = trainer.train(records, cfg, tmp_path, model)
        g = gen.load_checkpoint(ck)
        assert g.config.fusion_mode == "last_layer_only"
