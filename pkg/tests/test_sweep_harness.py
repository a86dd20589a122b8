"""Relative-WER arithmetic, evaluator-driven sweeps, and domain ablations."""

import json
import shlex
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synvec.errors import EvaluatorError, ValidationError
from synvec.sweep_harness import (
    DEFAULT_LAMBDA_GRID,
    EvalRecord,
    SweepConfig,
    SweepResult,
    best_lambda,
    relative_wer,
    run_domain_ablation,
    run_lambda_sweep,
)
from synvec.tensor_store import TensorMap, read_checkpoint, write_checkpoint
from synvec.vector_ops import compute_task_vector, ensemble_average

PY = shlex.quote(sys.executable)

# Prints {"wer": |lambda - 0.4| + 1}; a stub with a known interior minimum.
U_SHAPE_EVALUATOR = (
    f'{PY} -c "import json,sys; lam=float(sys.argv[1]); '
    "print(json.dumps({'wer': abs(lam-0.4)+1}))\" {lambda}"
)

CONSTANT_EVALUATOR = f"{PY} -c \"import json; print(json.dumps({{'wer': 12.5}}))\""


def l2_evaluator(reference_path):
    # Reports the l2 norm of (checkpoint - reference); lets tests predict WERs.
    return (
        f'{PY} -c "import json,sys,numpy; from synvec.tensor_store import read_checkpoint; '
        "a = read_checkpoint(sys.argv[1]); b = read_checkpoint(sys.argv[2]); "
        "sq = sum(float(numpy.sum((a[n].astype('f8')-b[n].astype('f8'))**2)) for n in a.names()); "
        "print(json.dumps({'wer': sq ** 0.5}))\" "
        f"{{checkpoint}} {shlex.quote(str(reference_path))}"
    )


def fixture_model_and_vectors(values=((1.0,), (3.0,))):
    model = TensorMap({"w": np.zeros(1, dtype=np.float32)})
    vectors = [
        compute_task_vector(TensorMap({"w": np.array(v, dtype=np.float32)}), model)
        for v in values
    ]
    return model, vectors


# --- relative WER ---


def test_relative_wer_published_average_pair():
    assert relative_wer(20.31, 17.01) == pytest.approx(16.25, abs=0.01)


def test_relative_wer_published_degradation_pair():
    assert relative_wer(15.45, 20.38) == pytest.approx(-31.91, abs=0.01)


def test_relative_wer_no_change_is_zero():
    for value in (0.5, 7.0, 99.9):
        assert relative_wer(value, value) == 0.0


def test_relative_wer_rejects_non_positive_baseline():
    with pytest.raises(ValidationError):
        relative_wer(0.0, 1.0)
    with pytest.raises(ValidationError):
        relative_wer(-3.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(
    baseline=st.floats(0.01, 100, allow_nan=False),
    adapted=st.floats(0, 100, allow_nan=False),
)
def test_relative_wer_reconstruction(baseline, adapted):
    rel = relative_wer(baseline, adapted)
    assert adapted == pytest.approx(baseline * (1 - rel / 100.0), abs=1e-9)


# --- config validation ---


def test_sweep_config_normalizes_grid(tmp_path):
    config = SweepConfig(evaluator="x", workdir=tmp_path, lambda_grid=(0.5, 0.1, 0.3))
    assert config.lambda_grid == (0.1, 0.3, 0.5)


def test_sweep_config_rejects_bad_grids(tmp_path):
    with pytest.raises(ValidationError):
        SweepConfig(evaluator="x", workdir=tmp_path, lambda_grid=())
    with pytest.raises(ValidationError):
        SweepConfig(evaluator="x", workdir=tmp_path, lambda_grid=(0.1, 0.1))
    with pytest.raises(ValidationError):
        SweepConfig(evaluator="x", workdir=tmp_path, lambda_grid=(float("nan"),))
    with pytest.raises(ValidationError):
        SweepConfig(evaluator="  ", workdir=tmp_path)


def test_default_grid_spans_zero_to_one():
    assert DEFAULT_LAMBDA_GRID == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


# --- sweeps ---


def test_singleton_grid_sweep(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=CONSTANT_EVALUATOR, workdir=tmp_path, lambda_grid=(0.0,))
    result = run_lambda_sweep(model, vectors[0], config)
    assert len(result.records) == 1
    assert result.records[0].lam == 0.0 and result.records[0].wer == 12.5
    assert best_lambda(result) == 0.0


def test_u_shaped_stub_finds_interior_minimum(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=U_SHAPE_EVALUATOR, workdir=tmp_path)
    result = run_lambda_sweep(model, vectors, config)
    assert len(result.records) == 11 and not result.failures
    assert best_lambda(result) == 0.4


def test_partial_failure_keeps_other_grid_points(tmp_path):
    # Evaluator emits malformed output at lambda == 0.3 only.
    evaluator = (
        f'{PY} -c "import json,sys; lam=float(sys.argv[1]); '
        "print('not json' if lam == 0.3 else json.dumps({'wer': lam + 1}))\" {lambda}"
    )
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=evaluator, workdir=tmp_path)
    result = run_lambda_sweep(model, vectors, config)
    assert len(result.records) == 10
    assert len(result.failures) == 1
    assert result.failures[0].lam == 0.3 and result.failures[0].kind == "output"


def test_all_failures_raise(tmp_path):
    model, vectors = fixture_model_and_vectors()
    evaluator = f'{PY} -c "import sys; sys.exit(3)"'
    config = SweepConfig(evaluator=evaluator, workdir=tmp_path, lambda_grid=(0.0, 1.0))
    with pytest.raises(EvaluatorError):
        run_lambda_sweep(model, vectors, config)


def test_nonzero_exit_recorded_with_code(tmp_path):
    model, vectors = fixture_model_and_vectors()
    evaluator = (
        f'{PY} -c "import json,sys; lam=float(sys.argv[1]); '
        "sys.exit(7) if lam > 0 else print(json.dumps({'wer': 1.0}))\" {lambda}"
    )
    config = SweepConfig(evaluator=evaluator, workdir=tmp_path, lambda_grid=(0.0, 0.5))
    result = run_lambda_sweep(model, vectors, config)
    assert len(result.records) == 1
    failure = result.failures[0]
    assert failure.kind == "exit" and failure.exit_code == 7


def test_negative_wer_is_output_failure(tmp_path):
    model, vectors = fixture_model_and_vectors()
    evaluator = f"{PY} -c \"import json; print(json.dumps({{'wer': -1.0}}))\""
    config = SweepConfig(evaluator=evaluator, workdir=tmp_path, lambda_grid=(0.0, 0.5))
    with pytest.raises(EvaluatorError):
        run_lambda_sweep(model, vectors, config)


def test_timeout_is_per_point_failure(tmp_path, monkeypatch):
    monkeypatch.setenv("SYNVEC_EVAL_TIMEOUT_SECS", "0.3")
    model, vectors = fixture_model_and_vectors()
    evaluator = (
        f'{PY} -c "import json,sys,time; lam=float(sys.argv[1]); '
        "time.sleep(5) if lam > 0 else None; print(json.dumps({'wer': 1.0}))\" {lambda}"
    )
    config = SweepConfig(evaluator=evaluator, workdir=tmp_path, lambda_grid=(0.0, 0.5))
    result = run_lambda_sweep(model, vectors, config)
    assert [r.lam for r in result.records] == [0.0]
    assert result.failures[0].kind == "timeout"


def test_invalid_timeout_env_rejected(tmp_path, monkeypatch):
    monkeypatch.setenv("SYNVEC_EVAL_TIMEOUT_SECS", "soon")
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=CONSTANT_EVALUATOR, workdir=tmp_path, lambda_grid=(0.0,))
    with pytest.raises(ValidationError):
        run_lambda_sweep(model, vectors, config)


def test_zero_lambda_checkpoint_matches_input_file(tmp_path):
    model, vectors = fixture_model_and_vectors()
    model_path = tmp_path / "model.safetensors"
    write_checkpoint(model, model_path)
    config = SweepConfig(
        evaluator=CONSTANT_EVALUATOR,
        workdir=tmp_path / "work",
        lambda_grid=(0.0,),
        keep_checkpoints=True,
    )
    result = run_lambda_sweep(model, vectors, config)
    materialized = result.records[0].checkpoint_path
    assert (tmp_path / "work").exists()
    assert open(materialized, "rb").read() == model_path.read_bytes()


def test_checkpoints_deleted_unless_kept(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=CONSTANT_EVALUATOR, workdir=tmp_path / "w",
                         lambda_grid=(0.0, 0.5))
    run_lambda_sweep(model, vectors, config)
    assert list((tmp_path / "w").glob("*.safetensors")) == []


def test_min_wer_never_worse_than_zero_lambda(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=U_SHAPE_EVALUATOR, workdir=tmp_path)
    result = run_lambda_sweep(model, vectors, config)
    at_zero = next(r.wer for r in result.records if r.lam == 0.0)
    assert min(r.wer for r in result.records) <= at_zero


def test_parallel_matches_serial(tmp_path):
    model, vectors = fixture_model_and_vectors()
    serial = run_lambda_sweep(
        model, vectors,
        SweepConfig(evaluator=U_SHAPE_EVALUATOR, workdir=tmp_path / "s"),
    )
    parallel = run_lambda_sweep(
        model, vectors,
        SweepConfig(evaluator=U_SHAPE_EVALUATOR, workdir=tmp_path / "p", parallel_workers=4),
    )
    strip = lambda result: [(r.lam, r.wer) for r in result.records]
    assert strip(serial) == strip(parallel)


def test_sweep_serialization_is_deterministic(tmp_path):
    model, vectors = fixture_model_and_vectors()
    runs = []
    for _ in range(2):
        config = SweepConfig(evaluator=U_SHAPE_EVALUATOR, workdir=tmp_path / "d")
        runs.append(run_lambda_sweep(model, vectors, config))
    assert runs[0].to_json() == runs[1].to_json()
    assert runs[0].to_csv() == runs[1].to_csv()


def test_sweep_json_round_trip(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=U_SHAPE_EVALUATOR, workdir=tmp_path)
    result = run_lambda_sweep(model, vectors, config)
    back = SweepResult.from_json_obj(json.loads(result.to_json()))
    assert [(r.lam, r.wer) for r in back.records] == [(r.lam, r.wer) for r in result.records]
    assert back.lambda_grid == result.lambda_grid


def test_csv_has_lambda_wer_columns(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=CONSTANT_EVALUATOR, workdir=tmp_path, lambda_grid=(0.0, 1.0))
    lines = run_lambda_sweep(model, vectors, config).to_csv().splitlines()
    assert lines[0] == "lambda,wer"
    assert lines[1] == "0.0,12.5"


# --- best_lambda ---


def make_result(pairs):
    records = tuple(
        EvalRecord(lam=lam, wer=wer, checkpoint_path="", evaluator_stdout="", wall_time=0.0)
        for lam, wer in sorted(pairs)
    )
    return SweepResult(lambda_grid=tuple(sorted(l for l, _ in pairs)), records=records,
                       failures=())


def test_best_lambda_picks_minimum():
    assert best_lambda(make_result([(0.1, 5.0), (0.2, 4.0)])) == 0.2


def test_best_lambda_tie_breaks_to_smaller():
    assert best_lambda(make_result([(0.3, 4.0), (0.5, 4.0)])) == 0.3


def test_best_lambda_requires_records():
    with pytest.raises(ValidationError):
        best_lambda(SweepResult(lambda_grid=(0.0,), records=(), failures=()))


# --- ablation ---


def test_ablation_single_vector_single_point(tmp_path):
    model, vectors = fixture_model_and_vectors(values=((2.0,),))
    model_path = tmp_path / "model.st"
    write_checkpoint(model, model_path)
    config = SweepConfig(evaluator=l2_evaluator(model_path), workdir=tmp_path / "w")
    result = run_domain_ablation(model, vectors, 1.0, config)
    assert len(result.points) == 1
    point = result.points[0]
    assert point.k == 1 and point.per_seed == (point.mean_wer,)
    assert point.mean_wer == pytest.approx(2.0, rel=1e-6)


def test_ablation_prefix_policy_uses_ensemble_mean(tmp_path):
    model, vectors = fixture_model_and_vectors(values=((1.0,), (3.0,)))
    model_path = tmp_path / "model.st"
    write_checkpoint(model, model_path)
    config = SweepConfig(evaluator=l2_evaluator(model_path), workdir=tmp_path / "w")
    result = run_domain_ablation(model, vectors, 1.0, config, policy="prefix")
    # k=2 applies the mean of [1.0] and [3.0] -> delta 2.0
    by_k = {p.k: p.mean_wer for p in result.points}
    assert by_k[1] == pytest.approx(1.0, rel=1e-6)
    assert by_k[2] == pytest.approx(2.0, rel=1e-6)


def test_ablation_random_policy_mean_over_seeds(tmp_path):
    values = ((1.0,), (3.0,), (5.0,))
    model, vectors = fixture_model_and_vectors(values=values)
    model_path = tmp_path / "model.st"
    write_checkpoint(model, model_path)
    config = SweepConfig(evaluator=l2_evaluator(model_path), workdir=tmp_path / "w")
    seeds = (0, 1, 2)
    result = run_domain_ablation(model, vectors, 1.0, config, ks=[2], policy="random",
                                 seeds=seeds)
    point = result.points[0]
    assert len(point.per_seed) == 3
    # Independent oracle: replay the documented subset rule by hand.
    expected = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        chosen = rng.choice(3, size=2, replace=False)
        mean_delta = np.mean([values[i][0] for i in chosen])
        expected.append(abs(mean_delta))
    assert point.per_seed == pytest.approx(expected, rel=1e-6)
    assert point.mean_wer == pytest.approx(np.mean(expected), rel=1e-6)


def test_ablation_validates_ks(tmp_path):
    model, vectors = fixture_model_and_vectors()
    config = SweepConfig(evaluator=CONSTANT_EVALUATOR, workdir=tmp_path)
    with pytest.raises(ValidationError):
        run_domain_ablation(model, vectors, 1.0, config, ks=[0, 1])
    with pytest.raises(ValidationError):
        run_domain_ablation(model, vectors, 1.0, config, ks=[2, 1])
    with pytest.raises(ValidationError):
        run_domain_ablation(model, vectors, 1.0, config, ks=[3])


def test_ablation_csv_shape(tmp_path):
    model, vectors = fixture_model_and_vectors()
    model_path = tmp_path / "model.st"
    write_checkpoint(model, model_path)
    config = SweepConfig(evaluator=l2_evaluator(model_path), workdir=tmp_path / "w")
    result = run_domain_ablation(model, vectors, 0.5, config, policy="random", seeds=(0, 1))
    lines = result.to_csv().splitlines()
    assert lines[0] == "k,mean_wer,seed_values"
    assert all(line.count(",") == 2 for line in lines[1:])
    assert ";" in lines[1]


def test_ablation_determinism(tmp_path):
    model, vectors = fixture_model_and_vectors(values=((1.0,), (3.0,), (5.0,)))
    model_path = tmp_path / "model.st"
    write_checkpoint(model, model_path)
    outputs = []
    for _ in range(2):
        config = SweepConfig(evaluator=l2_evaluator(model_path), workdir=tmp_path / "w")
        outputs.append(
            run_domain_ablation(model, vectors, 1.0, config, policy="random",
                                seeds=(0, 1, 2)).to_json()
        )
    assert outputs[0] == outputs[1]
