import numpy as np
import pytest

from petah.adapters import AdaptationPolicy, inject
from petah.data import GENERATORS, Split, SyntheticTaskSpec, generate_dataset, pretraining_task, standard_tasks
from petah.models import ModelConfig, build_mini_hybrid
from petah.tensor import Tensor
from petah.training import (
    CSV_COLUMNS,
    AdamW,
    TrainConfig,
    TrainingDiverged,
    accuracy_metrics,
    adapt_task,
    augment,
    default_grid,
    evaluate,
    grid_search,
    make_grid,
    read_results_csv,
    train,
    write_results_csv,
)

SMALL = ModelConfig(widths=(8, 12, 16, 24), blocks=(1, 0, 1, 1), heads=2, d_k=8, d_v=8)


def tiny_task(kind="color-statistics", k=3, seed=1, noise=0.1):
    return SyntheticTaskSpec(kind=kind, num_classes=k, n_train=60, n_val=30, n_test=30, noise=noise, seed=seed)


@pytest.fixture(scope="module")
def backbone():
    return build_mini_hybrid(SMALL, seed=4)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(tiny_task())


class TestData:
    @pytest.mark.parametrize("kind", GENERATORS)
    def test_deterministic(self, kind):
        spec = tiny_task(kind)
        a, b = generate_dataset(spec), generate_dataset(spec)
        for split in ("train", "val", "test"):
            assert a[split].images.tobytes() == b[split].images.tobytes()
            assert np.array_equal(a[split].labels, b[split].labels)

    @pytest.mark.parametrize("kind", GENERATORS)
    def test_balanced_labels(self, kind):
        spec = SyntheticTaskSpec(kind=kind, num_classes=7, n_train=100, n_val=30, n_test=45, seed=2)
        for split in generate_dataset(spec).values():
            counts = np.bincount(split.labels, minlength=7)
            assert counts.max() - counts.min() <= 1

    def test_splits_differ(self):
        d = generate_dataset(tiny_task())
        assert d["train"].images[:5].tobytes() != d["val"].images[:5].tobytes()

    def test_shapes_and_dtype(self):
        d = generate_dataset(SyntheticTaskSpec(resolution=16, n_train=10, n_val=5, n_test=5))
        assert d["train"].images.shape == (10, 3, 16, 16) and d["train"].images.dtype == np.float32

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(num_classes=1)
        with pytest.raises(ValueError):
            SyntheticTaskSpec(kind="mnist")

    def test_standard_tasks_cover_generators(self):
        assert [s.kind for s in standard_tasks()] == list(GENERATORS)
        assert pretraining_task().num_classes > 10

    @pytest.mark.parametrize("kind", GENERATORS)
    def test_nearest_centroid_oracle_separates(self, kind):
        spec = SyntheticTaskSpec(kind=kind, num_classes=2, noise=0.0, n_train=200, n_val=100, n_test=100, seed=3)
        d = generate_dataset(spec)

        def features(split):
            x = split.images
            if kind == "color-statistics":
                return np.concatenate([x.mean((2, 3)), x.std((2, 3))], 1)
            return np.abs(np.fft.fft2(x.mean(1))).reshape(len(x), -1)

        tr, te = features(d["train"]), features(d["test"])
        centroids = np.stack([tr[d["train"].labels == c].mean(0) for c in range(2)])
        pred = np.argmin(((te[:, None] - centroids) ** 2).sum(-1), 1)
        assert np.mean(pred == d["test"].labels) >= 0.9

    # pooled random stem features keep colour and spectrum but lose shape
    @pytest.mark.parametrize("kind", ["frequency-patterns", "color-statistics"])
    def test_depth0_probe_separates_two_classes(self, kind):
        spec = SyntheticTaskSpec(kind=kind, num_classes=2, noise=0.0, n_train=200, n_val=100, n_test=100, seed=3)
        g = build_mini_hybrid(ModelConfig(blocks=(0, 0, 0, 0), num_classes=2))
        model = inject(g, AdaptationPolicy("linear_probe"), num_classes=2)
        res = train(model, generate_dataset(spec), TrainConfig(epochs=5, head_lr=3e-2, batch_size=32))
        assert res.best_val >= 0.9


class TestEvaluate:
    def test_perfect(self):
        labels = np.arange(20) % 4
        assert accuracy_metrics(labels, labels) == {"top1": 1.0, "mean_per_class": 1.0}

    def test_uniform_random_predictor(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 10, 1000)
        assert abs(accuracy_metrics(rng.integers(0, 10, 1000), labels)["top1"] - 0.1) <= 0.03

    def test_constant_predictor(self):
        labels = np.arange(60) % 6
        m = accuracy_metrics(np.zeros(60, dtype=int), labels)
        assert m["top1"] == pytest.approx(1 / 6) and m["mean_per_class"] == pytest.approx(1 / 6)

    def test_empty_split(self):
        with pytest.raises(ValueError):
            accuracy_metrics(np.zeros(0), np.zeros(0))

    def test_argmax_first_index_ties(self, backbone, data):
        # zero head: all logits tie, argmax picks class 0
        model = inject(backbone, AdaptationPolicy("linear_probe"), num_classes=3)
        expected = float(np.mean(data["val"].labels == 0))
        assert evaluate(model, data["val"])["top1"] == expected


class TestTrain:
    def test_zero_learning_rates(self, backbone, data):
        model = inject(backbone, AdaptationPolicy.petah(1), num_classes=3)
        before = {k: v.data.tobytes() for k, v in model.parameters().items()}
        res = train(model, data, TrainConfig(epochs=3, head_lr=0.0, adapter_lr=0.0, batch_size=16))
        assert {k: v.data.tobytes() for k, v in model.parameters().items()} == before
        assert len({h["val_acc"] for h in res.history}) == 1

    def test_linear_probe_recovers_teacher_head(self, backbone):
        # labels from a random head on the same frozen features are separable by construction
        rng = np.random.default_rng(8)
        teacher = inject(backbone, AdaptationPolicy("linear_probe"), num_classes=2)
        head = teacher.graph.head
        teacher.set_parameter(head.param_name("weight"), Tensor(rng.normal(size=head.params["weight"].shape).astype(np.float32)))
        images = generate_dataset(SyntheticTaskSpec(kind="textured-shapes", n_train=200, n_val=100, n_test=10, seed=8))
        margin = {k: np.diff(teacher.forward(v.images).data, axis=1)[:, 0] for k, v in images.items()}
        cut = np.median(margin["train"])
        band = np.quantile(np.abs(margin["train"] - cut), 0.2)  # drop points hugging the boundary
        data = {}
        for k, v in images.items():
            keep = np.abs(margin[k] - cut) > band
            data[k] = Split(v.images[keep], (margin[k][keep] > cut).astype(np.int64))
        assert 0.3 < data["val"].labels.mean() < 0.7
        model = inject(backbone, AdaptationPolicy("linear_probe"), num_classes=2)
        cfg = TrainConfig(epochs=40, head_lr=1e-2, batch_size=20, random_crop=False, hflip=False)
        assert train(model, data, cfg).best_val >= 0.9

    def test_same_seed_same_history(self, backbone, data):
        cfg = TrainConfig(epochs=2, batch_size=16, seed=3)
        runs = [train(inject(backbone, AdaptationPolicy.petah(2), num_classes=3), data, cfg) for _ in range(2)]
        assert runs[0].history == runs[1].history
        p0, p1 = runs[0].model.parameters(), runs[1].model.parameters()
        assert all(p0[k].data.tobytes() == p1[k].data.tobytes() for k in p0)

    def test_only_trainable_change(self, backbone, data):
        model = inject(backbone, AdaptationPolicy("attn_ft"), num_classes=3)
        frozen = {k: v for k, v in model.frozen_parameters().items()}
        cfg = TrainConfig(epochs=2, batch_size=16, adapter_lr=1e-2, debug_frozen_check=True)
        train(model, data, cfg)
        now = model.graph.parameters()
        assert all(now[k].data.tobytes() == t.data.tobytes() for k, t in frozen.items())
        changed = [k for k in model.trainable if model.parameters()[k].data.tobytes() != backbone.parameters().get(k, Tensor([0])).data.tobytes()]
        assert changed

    def test_best_epoch_restored(self, backbone, data):
        model = inject(backbone, AdaptationPolicy("linear_probe"), num_classes=3)
        res = train(model, data, TrainConfig(epochs=4, batch_size=16, head_lr=5e-2))
        assert evaluate(model, data["val"])["top1"] == res.best_val == max(h["val_acc"] for h in res.history)

    def test_empty_trainable_set(self, backbone, data):
        model = inject(backbone, AdaptationPolicy("linear_probe"))
        model.trainable = []
        with pytest.raises(ValueError):
            train(model, data, TrainConfig(epochs=1))

    def test_divergence_reported(self, backbone, data):
        model = inject(backbone, AdaptationPolicy("full_ft"), num_classes=3)
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
            train(model, data, TrainConfig(epochs=3, head_lr=1e30, adapter_lr=1e30, batch_size=16))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(head_lr=-1)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


def test_adamw_matches_reference_step():
    rng = np.random.default_rng(0)
    w, g = rng.normal(size=4), rng.normal(size=4)
    opt = AdamW({"w": 0.1}, weight_decay=0.01)
    new = opt.step({"w": Tensor(w)}, {"w": Tensor(g)})["w"]
    m, v = 0.1 * g, 0.001 * g * g
    ref = w * (1 - 0.1 * 0.01) - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(new, ref, rtol=1e-12)


def test_augment_shapes_and_flip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3, 8, 8)).astype(np.float32)
    assert augment(x, rng, True, True).shape == x.shape
    flipped = augment(x, np.random.default_rng(1), False, True)
    for a, b in zip(x, flipped):
        assert np.array_equal(a, b) or np.array_equal(a[:, :, ::-1], b)


class TestGrid:
    def build(self, backbone, policy, k=3):
        return lambda seed: inject(backbone, policy, num_classes=k, seed=seed)

    def test_singleton(self, backbone, data):
        cfg = TrainConfig(epochs=1, batch_size=20, head_lr=1e-2)
        res = grid_search(self.build(backbone, AdaptationPolicy("linear_probe")), data, [cfg], final_seeds=(0,))
        assert res.best_config == cfg

    def test_zero_lr_not_selected(self, backbone):
        d = generate_dataset(SyntheticTaskSpec(kind="color-statistics", num_classes=2, noise=0.0, n_train=60, n_val=40, n_test=40, seed=9))
        base = TrainConfig(epochs=3, batch_size=20)
        grid = make_grid([0.0, 3e-2], [0.0], [0.0], base)
        res = grid_search(self.build(backbone, AdaptationPolicy("linear_probe"), 2), d, grid, final_seeds=(0,))
        positive = [r for r in res.rows if r["head_lr"] > 0]
        assert max(r["accuracy"] for r in positive) > 0.5
        assert res.best_config.head_lr == 3e-2

    def test_row_count_and_csv(self, backbone, data, tmp_path):
        grid = make_grid([1e-2, 3e-3], [1e-2], [1e-4, 0.0], TrainConfig(epochs=1, batch_size=30))
        res = grid_search(self.build(backbone, AdaptationPolicy.petah(1)), data, grid, seeds=(0, 1), final_seeds=(0, 1, 2))
        assert len(res.rows) == len(grid) * 2
        assert len(res.test_rows) == 3 and res.test_mean == pytest.approx(np.mean([r["accuracy"] for r in res.test_rows]))
        path = tmp_path / "r.csv"
        write_results_csv(path, res.all_rows)
        rows = read_results_csv(path)
        assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == len(res.all_rows)
        assert {r["split"] for r in rows} == {"val", "test"}

    def test_diverged_cell_skipped(self, backbone, data):
        grid = [TrainConfig(epochs=1, batch_size=30, head_lr=1e30, adapter_lr=1e30), TrainConfig(epochs=1, batch_size=30)]
        with np.errstate(all="ignore"):
            res = grid_search(self.build(backbone, AdaptationPolicy("full_ft")), data, grid, final_seeds=(0,))
        assert res.best_config == grid[1]
        assert np.isnan(res.rows[0]["accuracy"])

    def test_empty_grid(self, backbone, data):
        with pytest.raises(ValueError):
            grid_search(self.build(backbone, AdaptationPolicy("linear_probe")), data, [])

    def test_default_grid_per_strategy(self):
        assert {c.adapter_lr for c in default_grid(AdaptationPolicy("linear_probe"))} == {0.0}
        assert len(default_grid(AdaptationPolicy.petah(2))) == 4


def test_end_to_end_determinism(backbone):
    def run():
        data = generate_dataset(tiny_task("frequency-patterns", seed=12))
        grid = [TrainConfig(epochs=2, batch_size=20)]
        res = adapt_task(backbone, AdaptationPolicy.petah(1), data, 3, grid, final_seeds=(0,))
        probe = data["test"].images[:8]
        return res.test_rows, res.models[0].forward(probe).data.tobytes()

    assert run() == run()
