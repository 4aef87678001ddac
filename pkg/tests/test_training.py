"""Tests for the training harness: optimizer math, freezing, ablations.

The AdamW step is checked against hand-evaluated formulas and against
torch.optim.AdamW as an independent implementation of the same update.
End-to-end properties (loss decrease, bitwise reproducibility, frozen
backbone) run on reduced configurations to stay fast.
"""

import math

import numpy as np
import pytest
import torch

from pointbridge.adapter import AdapterConfig
from pointbridge.backbone import BackboneConfig, init_random_backbone, tensor_shapes
from pointbridge.data import DatasetSpec, make_benchmark
from pointbridge.errors import ConfigMismatch, NonScalarLoss
from pointbridge.projection import LINE1D, PLANE2D
from pointbridge.tokenizer import TokenizerConfig, tokenizer_param_count
from pointbridge.training import (
    AdamState,
    ExperimentConfig,
    Metrics,
    TrainConfig,
    TrainableSet,
    adapter_state_view,
    classification_loss,
    cosine_lr,
    desk_experiment,
    evaluate,
    grad,
    init_trainables,
    param_report,
    pipeline_logits,
    probe_experiment,
    reference_experiment,
    run_ablation,
    step_adamw,
    toy_experiment,
    train,
    write_metrics_csv,
)

torch.set_num_threads(1)


def micro_experiment(mode=LINE1D, seed=0, epochs=1):
    """Smallest config that exercises every pipeline stage."""
    return ExperimentConfig(
        backbone=BackboneConfig(
            n_blocks=2,
            dim=16,
            n_heads=2,
            pe_mode=mode,
            plane_extent=(52, 52),
            patch_size=26,
            modality_tag="synthetic",
        ),
        tokenizer=TokenizerConfig(
            stages=2, points_in=32, tokens_out=8, k_neighbors=4, dims=(6, 8, 12, 16)
        ),
        adapter=AdapterConfig(
            mode=mode, segment_size=2, patch_size=26, grid_size_3d=0.4, bottleneck_dim=8
        ),
        train=TrainConfig(
            lr=1e-3, epochs=epochs, batch_size=8, seed=seed, m_views=2
        ),
        n_classes=5,
        augment=None,
    )


@pytest.fixture(scope="module")
def micro_dataset():
    return make_benchmark(DatasetSpec(n_train=2, n_test=1, n_points=32, seed=3))


class TestAdamW:
    def test_single_step_hand_example(self):
        """p=1, g=1, lr=0.1, no decay: p' = 1 - 0.1 / (1 + eps)."""
        p = torch.tensor([1.0], dtype=torch.float64)
        g = torch.tensor([1.0], dtype=torch.float64)
        state = AdamState()
        step_adamw({"p": p}, {"p": g}, state, lr=0.1)
        expected = 1.0 - 0.1 * (1.0 / (math.sqrt(1.0) + 1e-8))
        np.testing.assert_allclose(p.item(), expected, rtol=0, atol=1e-15)

    def test_single_step_with_decay(self):
        """Decoupled decay subtracts lr * wd * p on top of the update."""
        p = torch.tensor([2.0], dtype=torch.float64)
        g = torch.tensor([1.0], dtype=torch.float64)
        step_adamw({"p": p}, {"p": g}, AdamState(), lr=0.1, weight_decay=0.05)
        expected = 2.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.05 * 2.0)
        np.testing.assert_allclose(p.item(), expected, rtol=0, atol=1e-15)

    def test_two_steps_hand_computed(self):
        """Bias-corrected moments after two steps with g = 1 then 2."""
        p = torch.tensor([0.0], dtype=torch.float64)
        state = AdamState()
        step_adamw({"p": p}, {"p": torch.tensor([1.0], dtype=torch.float64)}, state, lr=0.1)
        step_adamw({"p": p}, {"p": torch.tensor([2.0], dtype=torch.float64)}, state, lr=0.1)
        m2 = 0.9 * 0.1 + 0.1 * 2.0
        v2 = 0.999 * 0.001 + 0.001 * 4.0
        m2_hat = m2 / (1.0 - 0.9**2)
        v2_hat = v2 / (1.0 - 0.999**2)
        p1 = -0.1 * (1.0 / (1.0 + 1e-8))
        expected = p1 - 0.1 * m2_hat / (math.sqrt(v2_hat) + 1e-8)
        np.testing.assert_allclose(p.item(), expected, rtol=1e-14)

    def test_matches_torch_adamw(self):
        """Ten steps track torch.optim.AdamW on the same trajectory."""
        rng = np.random.default_rng(42)
        ours = {
            "a": torch.tensor(rng.normal(size=(4, 3))),
            "b": torch.tensor(rng.normal(size=(5,))),
        }
        theirs = {k: v.clone().requires_grad_(True) for k, v in ours.items()}
        opt = torch.optim.AdamW(
            list(theirs.values()), lr=0.01, weight_decay=0.05, eps=1e-8
        )
        state = AdamState()
        for _ in range(10):
            grads = {
                "a": torch.tensor(rng.normal(size=(4, 3))),
                "b": torch.tensor(rng.normal(size=(5,))),
            }
            step_adamw(ours, grads, state, lr=0.01, weight_decay=0.05)
            for k, v in theirs.items():
                v.grad = grads[k].clone()
            opt.step()
        for k in ours:
            np.testing.assert_allclose(
                ours[k].numpy(), theirs[k].detach().numpy(), rtol=1e-12
            )

    def test_state_shared_across_params(self):
        """The step counter is global; per-tensor moments accumulate."""
        state = AdamState()
        p = {"x": torch.zeros(2), "y": torch.zeros(3)}
        g = {"x": torch.ones(2), "y": torch.ones(3)}
        step_adamw(p, g, state, lr=0.1)
        assert state.step == 1
        assert set(state.m) == {"x", "y"}


class TestCosineLR:
    def test_endpoints_and_midpoint(self):
        """lr(0) = lr0, lr(T/2) = lr0/2, lr(T) = 0."""
        np.testing.assert_allclose(cosine_lr(0, 50, 1e-3), 1e-3)
        np.testing.assert_allclose(cosine_lr(25, 50, 1e-3), 5e-4)
        np.testing.assert_allclose(cosine_lr(50, 50, 1e-3), 0.0, atol=1e-19)

    def test_quarter_point(self):
        expected = 1e-3 * 0.5 * (1.0 + math.cos(math.pi * 0.25))
        np.testing.assert_allclose(cosine_lr(10, 40, 1e-3), expected, rtol=1e-15)

    def test_monotone_nonincreasing(self):
        vals = [cosine_lr(e, 50, 1.0) for e in range(51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestGrad:
    def test_quadratic_exact(self):
        """d/dp sum((p - c)^2) = 2 (p - c), exactly."""
        p = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        c = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)
        tset = TrainableSet({"p": p})
        g = grad(lambda: ((tset.params["p"] - c) ** 2).sum(), tset)
        np.testing.assert_array_equal(g["p"].numpy(), (2.0 * (p - c)).detach().numpy())

    def test_unused_parameter_gets_zeros(self):
        tset = TrainableSet(
            {"used": torch.ones(2, dtype=torch.float64), "idle": torch.ones(3)}
        )
        g = grad(lambda: tset.params["used"].sum(), tset)
        np.testing.assert_array_equal(g["idle"].numpy(), np.zeros(3, dtype=np.float32))

    def test_non_scalar_rejected(self):
        tset = TrainableSet({"p": torch.ones(2)})
        with pytest.raises(NonScalarLoss):
            grad(lambda: tset.params["p"] * 2, tset)


class TestTrainableSet:
    def test_count_and_subset(self):
        tset = TrainableSet(
            {"head.w": torch.zeros(4, 3), "head.b": torch.zeros(3), "other": torch.zeros(2)}
        )
        assert tset.count() == 17
        sub = tset.subset("head.")
        assert set(sub) == {"w", "b"}
        assert sub["w"] is tset.params["head.w"]

    def test_disjoint_from_backbone(self):
        """No trainable name collides with a frozen tensor name."""
        exp = micro_experiment()
        tset = init_trainables(exp)
        frozen = set(tensor_shapes(exp.backbone))
        assert not (set(tset.params) & frozen)

    def test_adapter_state_view_aliases(self):
        """Mutating a registry tensor shows through the adapter view."""
        exp = micro_experiment()
        tset = init_trainables(exp)
        state = adapter_state_view(exp, tset)
        assert state.blocks[0]["down.w"] is tset.params["adapters.0.down.w"]

    def test_learnable_pe_params_present_only_when_used(self):
        exp = micro_experiment()
        assert not any(k.startswith("pe3d.") for k in init_trainables(exp).params)
        exp3 = ExperimentConfig(
            exp.backbone,
            exp.tokenizer,
            exp.adapter,
            TrainConfig(lr=1e-3, epochs=1, seed=0, pe_mode="learnable_3d", m_views=2),
            n_classes=5,
            augment=None,
        )
        names = set(init_trainables(exp3).params)
        assert {"pe3d.fc1.w", "pe3d.fc1.b", "pe3d.fc2.w", "pe3d.fc2.b"} <= names


class TestPipeline:
    @pytest.mark.parametrize(
        "pe_mode", ["virtual_projection", "sinusoidal_3d", "learnable_3d", "none"]
    )
    def test_logits_shape_all_pe_modes(self, micro_dataset, pe_mode):
        exp = micro_experiment()
        exp = ExperimentConfig(
            exp.backbone,
            exp.tokenizer,
            exp.adapter,
            TrainConfig(lr=1e-3, epochs=1, seed=0, pe_mode=pe_mode, m_views=2),
            n_classes=5,
            augment=None,
        )
        bundle = init_random_backbone(exp.backbone, seed=0)
        tset = init_trainables(exp)
        pts = torch.tensor(micro_dataset.train_points[:4], dtype=torch.float32)
        logits = pipeline_logits(pts, exp, bundle, tset)
        assert logits.shape == (4, 5)
        assert torch.isfinite(logits).all()

    def test_pe_mode_changes_logits(self, micro_dataset):
        """Virtual projection and no-PE produce different predictions."""
        outs = {}
        for pe_mode in ("virtual_projection", "none"):
            exp = micro_experiment()
            exp = ExperimentConfig(
                exp.backbone,
                exp.tokenizer,
                exp.adapter,
                TrainConfig(lr=1e-3, epochs=1, seed=0, pe_mode=pe_mode, m_views=2),
                n_classes=5,
                augment=None,
            )
            bundle = init_random_backbone(exp.backbone, seed=0)
            tset = init_trainables(exp)
            pts = torch.tensor(micro_dataset.train_points[:2], dtype=torch.float32)
            outs[pe_mode] = pipeline_logits(pts, exp, bundle, tset)
        assert not torch.allclose(outs["virtual_projection"], outs["none"])

    def test_probe_pipeline_has_head_only(self):
        """The probe preset trains nothing but the linear head."""
        exp = probe_experiment()
        tset = init_trainables(exp)
        assert set(tset.params) == {"head.w", "head.b"}

    def test_loss_decreases_first_five_steps(self, micro_dataset):
        """Five full-batch steps at lr 1e-3 strictly reduce the loss."""
        exp = micro_experiment()
        bundle = init_random_backbone(exp.backbone, seed=0)
        tset = init_trainables(exp)
        pts = torch.tensor(micro_dataset.train_points, dtype=torch.float32)
        labels = torch.from_numpy(micro_dataset.train_labels)
        state = AdamState()
        losses = []
        for _ in range(6):
            def loss_fn():
                return classification_loss(
                    pipeline_logits(pts, exp, bundle, tset), labels
                )

            g = grad(loss_fn, tset)
            with torch.no_grad():
                losses.append(loss_fn().item())
            step_adamw(tset.params, g, state, lr=1e-3)
        for a, b in zip(losses, losses[1:]):
            assert b < a, f"loss went {a} -> {b}"


class TestTrainLoop:
    def test_metrics_rows_and_csv(self, micro_dataset, tmp_path):
        exp = micro_experiment(epochs=2)
        bundle = init_random_backbone(exp.backbone, seed=0)
        path = tmp_path / "metrics.csv"
        tset, metrics = train(micro_dataset, bundle, exp, metrics_path=str(path))
        assert len(metrics.rows) == 2
        assert metrics.rows[0][3] == 1e-3  # cosine starts at lr0
        assert 0.0 <= metrics.final_accuracy <= 1.0
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,acc,lr"
        assert len(lines) == 3
        cells = lines[1].split(",")
        assert float(cells[1]) == metrics.rows[0][1]  # repr round trip

    def test_backbone_frozen_through_training(self, micro_dataset):
        exp = micro_experiment(epochs=1)
        bundle = init_random_backbone(exp.backbone, seed=0)
        before = bundle.weights_sha256()
        train(micro_dataset, bundle, exp)
        assert bundle.weights_sha256() == before

    def test_same_seed_bitwise_identical(self, micro_dataset):
        """Two runs with one seed match in every metric and parameter."""
        exp = micro_experiment(epochs=2)
        runs = []
        for _ in range(2):
            bundle = init_random_backbone(exp.backbone, seed=0)
            runs.append(train(micro_dataset, bundle, exp))
        (tset_a, met_a), (tset_b, met_b) = runs
        assert met_a.rows == met_b.rows
        for name in tset_a.params:
            np.testing.assert_array_equal(
                tset_a.params[name].detach().numpy(),
                tset_b.params[name].detach().numpy(),
            )

    def test_different_seed_differs(self, micro_dataset):
        met = []
        for seed in (0, 1):
            exp = micro_experiment(seed=seed, epochs=1)
            bundle = init_random_backbone(exp.backbone, seed=0)
            met.append(train(micro_dataset, bundle, exp)[1])
        assert met[0].rows != met[1].rows

    def test_evaluate_range_and_determinism(self, micro_dataset):
        exp = micro_experiment()
        bundle = init_random_backbone(exp.backbone, seed=0)
        tset = init_trainables(exp)
        a = evaluate(micro_dataset, bundle, tset, exp)
        b = evaluate(micro_dataset, bundle, tset, exp)
        assert a == b
        assert 0.0 <= a <= 1.0


class TestParamReport:
    def test_micro_counts_by_formula(self):
        """Trainables = tokenizer + adapters + head, each in closed form."""
        from pointbridge.adapter import adapter_param_count

        exp = micro_experiment()
        tset = init_trainables(exp)
        bundle = init_random_backbone(exp.backbone, seed=0)
        trainable, total, ratio = param_report(tset, bundle)
        expected = (
            tokenizer_param_count(exp.tokenizer)
            + adapter_param_count(exp.adapter, 16, exp.insertion_depth())
            + 16 * 5
            + 5
        )
        assert trainable == expected
        frozen = sum(t.numel() for t in bundle.tensors.values())
        assert total == expected + frozen
        np.testing.assert_allclose(ratio, expected / (expected + frozen), rtol=1e-15)

    def test_reference_budget(self):
        """Full-scale preset: under 5% of total, 0.5M..1.5M trainables."""
        for mode in (LINE1D, PLANE2D):
            exp = reference_experiment(mode)
            tset = init_trainables(exp)
            frozen = sum(
                int(np.prod(s)) for s in tensor_shapes(exp.backbone).values()
            )
            trainable = tset.count()
            assert 500_000 <= trainable <= 1_500_000
            assert trainable / (trainable + frozen) <= 0.05

    def test_bottleneck_doubling_mlp_baseline(self):
        """mlp_baseline per block is D*a + a + a*D + D; doubling a doubles
        the weight terms exactly."""
        from dataclasses import replace
        from pointbridge.adapter import adapter_param_count

        base = micro_experiment().adapter
        a8 = adapter_param_count(replace(base, variant="mlp_baseline"), 16, 1)
        a16 = adapter_param_count(
            replace(base, variant="mlp_baseline", bottleneck_dim=16), 16, 1
        )
        assert a8 == 16 * 8 + 8 + 8 * 16 + 16
        assert a16 == 16 * 16 + 16 + 16 * 16 + 16


class TestConfigValidation:
    def test_bad_lr(self):
        with pytest.raises(ConfigMismatch):
            TrainConfig(lr=0.0)

    def test_bad_pe_mode(self):
        with pytest.raises(ConfigMismatch):
            TrainConfig(pe_mode="fourier")

    def test_bad_scheduler(self):
        with pytest.raises(ConfigMismatch):
            TrainConfig(scheduler="linear")

    def test_insertion_depth_default_spans_all_blocks(self):
        exp = micro_experiment()
        assert exp.insertion_depth() == 2
        exp2 = ExperimentConfig(
            exp.backbone,
            exp.tokenizer,
            exp.adapter,
            TrainConfig(lr=1e-3, epochs=1, seed=0, insertion_depth=1, m_views=2),
            augment=None,
        )
        assert exp2.insertion_depth() == 1

    def test_toy_preset_is_self_consistent(self):
        exp = toy_experiment()
        assert exp.backbone.dim == exp.tokenizer.dims[-1]
        assert exp.tokenizer.tokens_out == exp.tokenizer.points_in // 2**exp.tokenizer.stages


class TestRunAblation:
    def test_main_table_csv(self, micro_dataset, tmp_path):
        path = tmp_path / "main.csv"
        rows = run_ablation(
            "main",
            micro_dataset,
            str(path),
            seeds=(0,),
            make_experiment=micro_experiment,
        )
        lines = path.read_text().splitlines()
        assert lines[0] == "vp,ga,params_m,acc_1d,acc_2d"
        assert len(lines) == 5
        assert [r["vp"] for r in rows] == ["0", "1", "0", "1"]
        for r in rows:
            for col in ("acc_1d", "acc_2d"):
                assert r[col] != ""
                float(r[col])  # parses

    def test_view_table_cells_empty_where_inapplicable(
        self, micro_dataset, tmp_path
    ):
        rows = run_ablation(
            "view",
            micro_dataset,
            str(tmp_path / "view.csv"),
            seeds=(0,),
            make_experiment=micro_experiment,
        )
        assert len(rows) == 6
        for r in rows[:3]:
            assert r["acc_2d"] != "" and r["acc_1d"] == ""
        for r in rows[3:]:
            assert r["acc_1d"] != "" and r["acc_2d"] == ""

    def test_failed_cell_recorded_not_raised(self, micro_dataset, tmp_path):
        """A cell that cannot train writes 'error' and the sweep goes on."""

        def flaky(mode=LINE1D, seed=0, epochs=1):
            exp = micro_experiment(mode, seed, epochs)
            if exp.backbone.pe_mode == PLANE2D:
                raise RuntimeError("simulated failure")
            return exp

        rows = run_ablation(
            "main",
            micro_dataset,
            str(tmp_path / "main.csv"),
            seeds=(0,),
            make_experiment=flaky,
        )
        for r in rows:
            assert r["acc_2d"] == "error"
            assert r["acc_1d"] not in ("", "error")

    def test_unknown_table_rejected(self, micro_dataset, tmp_path):
        with pytest.raises(ConfigMismatch, match="unknown ablation table"):
            run_ablation("bogus", micro_dataset, str(tmp_path / "x.csv"))
