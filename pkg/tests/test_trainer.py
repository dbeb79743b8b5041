import json
import math

import numpy as np
import pytest

from asl_fewshot.checkpoint import load_checkpoint, parameter_checksum, save_checkpoint
from asl_fewshot.data import Episode, generate_synthetic, split_corpus
from asl_fewshot.errors import ConfigError, TrainingError
from asl_fewshot.model import Ablation, ASLModel, EpisodeOutput, ModelConfig
from asl_fewshot.tensor import Tensor
from asl_fewshot.trainer import (
    ABLATION_ROWS,
    ALPHA_SWEEP,
    KERNEL_SWEEP,
    MetricsReport,
    TrainConfig,
    ablate,
    confidence_interval95,
    evaluate,
    run,
    sweep_configs,
    train,
)


@pytest.fixture(scope="module")
def tiny_split():
    corpus = generate_synthetic(num_classes=10, samples_per_class=6, num_attributes=4, image_size=16, seed=1)
    return split_corpus(corpus, 6)


def tiny_config(**kw):
    base = dict(n_way=2, m_shot=1, q_per_class=1, iterations=3, eval_tasks=4, channels=8, seed=5, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


# -- configuration ----------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"n_way": 1},
        {"m_shot": 0},
        {"alpha": -0.1},
        {"kernel_sizes": ()},
        {"model": "matchingnet"},
        {"q_per_class": 0},
        {"ablation": ("no_attributes", "zero_attributes")},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


def test_empty_kernels_allowed_without_psam():
    cfg = tiny_config(kernel_sizes=(), ablation=("no_psam",))
    assert cfg.ablation.no_psam


def test_config_dict_round_trip():
    cfg = tiny_config(ablation=("no_cam",), kernel_sizes=(3, 5))
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_default_protocol_values():
    cfg = TrainConfig()
    assert (cfg.n_way, cfg.m_shot, cfg.q_per_class) == (5, 1, 15)
    assert cfg.lr == 1e-3 and cfg.alpha == 1.0
    assert cfg.kernel_sizes == (3, 5, 7, 9)
    assert cfg.iterations == 5000 and cfg.eval_tasks == 2000


# -- training -----------------------------------------------------------------------


def test_zero_lr_leaves_parameters_unchanged(tiny_split):
    cfg = tiny_config(lr=0.0, iterations=1)
    model = ASLModel(cfg.model_config(4), image_shape=(16, 16, 3), seed=cfg.seed)
    before = {k: v.data.copy() for k, v in model.params.items()}
    train(cfg, tiny_split.train, model=model)
    for k, v in model.params.items():
        assert np.array_equal(v.data, before[k]), k


def test_training_moves_parameters(tiny_split):
    model, _ = train(tiny_config(iterations=1), tiny_split.train)
    fresh = ASLModel(tiny_config().model_config(4), image_shape=(16, 16, 3), seed=5)
    assert parameter_checksum(model) != parameter_checksum(fresh)


def test_replay_gives_identical_checksum_and_history(tiny_split):
    m1, r1 = train(tiny_config(), tiny_split.train)
    m2, r2 = train(tiny_config(), tiny_split.train)
    assert parameter_checksum(m1) == parameter_checksum(m2)
    assert r1.loss_history == r2.loss_history
    m3, _ = train(tiny_config(seed=6), tiny_split.train)
    assert parameter_checksum(m3) != parameter_checksum(m1)


def test_loss_history_fields_and_sanity(tiny_split):
    _, report = train(tiny_config(iterations=4), tiny_split.train)
    assert [h["iteration"] for h in report.loss_history] == [1, 2, 3, 4]
    for h in report.loss_history:
        assert h["cls"] >= 0 and h["attr"] >= 0 and h["total"] >= 0
        assert h["total"] == pytest.approx(h["cls"] + h["attr"], rel=1e-12)


def test_alpha_zero_with_zero_attributes(tiny_split):
    cfg = tiny_config(alpha=0.0, ablation=("zero_attributes",))
    _, report = train(cfg, tiny_split.train)
    for h in report.loss_history:
        # the attribute term is still computed but carries no weight
        assert h["attr"] is not None
        assert h["total"] == h["cls"]


def test_non_finite_loss_aborts_with_iteration(tiny_split):
    cfg = tiny_config(iterations=2)
    model = ASLModel(cfg.model_config(4), image_shape=(16, 16, 3), seed=5)
    model.params["backbone.block1.gamma"].data[:] = np.nan
    with pytest.raises(TrainingError, match="iteration 1"):
        train(cfg, tiny_split.train, model=model)


# -- evaluation -----------------------------------------------------------------------


def test_ci_hand_checked_five_tasks():
    accs = [0.6, 0.8, 1.0, 0.4, 0.7]
    mean = sum(accs) / 5
    var = sum((a - mean) ** 2 for a in accs) / 4
    assert confidence_interval95(accs) == pytest.approx(1.96 * math.sqrt(var) / math.sqrt(5), abs=1e-15)
    with pytest.raises(ConfigError):
        confidence_interval95([0.5])


class UniformModel:
    """Always answers with uniform probabilities."""

    def forward(self, episode, training=False):
        q = episode.num_query
        probs = Tensor(np.full((q, episode.n_way), 1.0 / episode.n_way))
        return EpisodeOutput(probs, probs.sum(), probs.sum(), None, None, None)


def test_uniform_classifier_is_at_chance():
    corpus = generate_synthetic(num_classes=10, samples_per_class=16, num_attributes=4, image_size=16, seed=0)
    split = split_corpus(corpus, 5)
    report = evaluate(UniformModel(), split.test, task_count=2000, n_way=5, m_shot=1, q_per_class=15)
    # argmax over ties picks class 0, which holds 1/N of the queries
    assert abs(report.mean_accuracy - 0.2) <= report.ci95 + 1e-12
    assert report.attr_mae is None and report.task_count == 2000


def test_evaluate_rejects_single_task(tiny_split):
    with pytest.raises(ConfigError):
        evaluate(UniformModel(), tiny_split.test, task_count=1, n_way=2, q_per_class=1)


def test_query_equal_to_prototype_scores_one():
    rng = np.random.default_rng(0)
    support = rng.uniform(size=(2, 16, 16, 3))
    attrs = rng.uniform(size=(2, 4))
    ep = Episode(
        n_way=2,
        m_shot=1,
        support_images=support,
        support_attributes=attrs,
        support_labels=np.array([0, 1]),
        support_ids=np.array([0, 1]),
        query_images=support[::-1].copy(),
        query_attributes=attrs[::-1].copy(),
        query_labels=np.array([1, 0]),
        query_ids=np.array([2, 3]),
        class_map=[0, 1],
    )
    # without attribute fusion, equal images give equal embeddings, so distance 0 wins
    model = ASLModel(ModelConfig(num_attributes=4, channels=8, ablation=Ablation(no_attributes=True)), (16, 16, 3))
    out = model.forward(ep, training=False)
    assert np.mean(np.argmax(out.probs.data, axis=1) == ep.query_labels) == 1.0


def test_evaluate_does_not_mutate(tiny_split):
    model, _ = train(tiny_config(), tiny_split.train)
    before = parameter_checksum(model)
    evaluate(model, tiny_split.test, task_count=5, n_way=2, m_shot=1, q_per_class=2)
    assert parameter_checksum(model) == before


def test_run_reports_accuracy_and_mae(tiny_split):
    _, report = run(tiny_config(), tiny_split)
    assert 0.0 <= report.mean_accuracy <= 1.0
    assert report.ci95 >= 0 and report.attr_mae is not None
    assert report.task_count == 4 and len(report.loss_history) == 3


def test_report_json_round_trip(tmp_path, tiny_split):
    _, report = run(tiny_config(), tiny_split)
    path = report.save(tmp_path / "metrics.json")
    doc = json.loads(path.read_text())
    assert {"mean_accuracy", "ci95", "attr_mae", "loss_history", "config", "wall_clock_seconds"} <= set(doc)
    back = MetricsReport.load(path)
    assert back.mean_accuracy == report.mean_accuracy and back.loss_history == report.loss_history
    assert TrainConfig.from_dict(back.config) == tiny_config()


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_split):
    model, _ = train(tiny_config(ablation=("no_cam",)), tiny_split.train)
    path = save_checkpoint(model, tmp_path / "checkpoint.bin")
    back = load_checkpoint(path)
    assert parameter_checksum(back) == parameter_checksum(model)
    assert back.config == model.config
    for k, v in model.buffers.items():
        assert np.array_equal(back.buffers[k], v)
    # identical state serialises to identical bytes
    save_checkpoint(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_protonet_checkpoint_round_trip(tmp_path, tiny_split):
    model, _ = train(tiny_config(model="protonet"), tiny_split.train)
    back = load_checkpoint(save_checkpoint(model, tmp_path / "p.bin"))
    assert parameter_checksum(back) == parameter_checksum(model)


# -- ablations and sweeps -------------------------------------------------------------


def test_sweep_axes_match_published_grids():
    assert ALPHA_SWEEP == (0.0, 0.001, 0.01, 0.1, 0.5, 1.0, 2.0)
    assert KERNEL_SWEEP == ((3,), (5,), (7,), (9,), (3, 5, 7), (5, 7, 9), (3, 5, 7, 9))
    alphas = sweep_configs(tiny_config(), "alpha")
    assert [c.alpha for _, c in alphas] == list(ALPHA_SWEEP)
    kernels = sweep_configs(tiny_config(), "kernels")
    assert [c.kernel_sizes for _, c in kernels] == list(KERNEL_SWEEP)
    with pytest.raises(ConfigError):
        sweep_configs(tiny_config(), "depth")


def test_ablation_rows_cover_all_axes():
    assert len(ABLATION_ROWS) == 7
    for flags in ABLATION_ROWS.values():
        Ablation.from_flags(flags)


def test_no_vap_no_avam_bit_identical_to_protonet(tiny_split):
    pure = tiny_config(ablation=("no_vap", "no_cam", "no_psam"))
    m1, r1 = run(pure, tiny_split)
    m2, r2 = run(tiny_config(model="protonet"), tiny_split)
    assert parameter_checksum(m1) == parameter_checksum(m2)
    assert [h["total"] for h in r1.loss_history] == [h["total"] for h in r2.loss_history]
    assert r1.task_accuracies == r2.task_accuracies


def test_ablate_runs_requested_rows(tiny_split):
    results = ablate(tiny_config(iterations=1), tiny_split, rows=["ASL", "Using all-0 attributes"])
    assert list(results) == ["ASL", "Using all-0 attributes"]
    with pytest.raises(ConfigError):
        ablate(tiny_config(), tiny_split, rows=["w/o everything"])
