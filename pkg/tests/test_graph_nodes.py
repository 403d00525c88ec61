from __future__ import annotations

from pathlib import Path
from unittest.mock import MagicMock

from src.errors import MetricError
from src.graph import ExperimentResources, evaluate_node, run_experiment, train_dn_node, train_mcnet_node
from src.pipeline import TrainResult, default_experiment


def _result(checkpoint, best_epoch=3, best_metric=0.25):
    return TrainResult(model=MagicMock(), history=[], best_epoch=best_epoch, best_metric=best_metric,
                       checkpoint=Path(checkpoint) if checkpoint else None, steps=10)


def _report():
    report = MagicMock()
    report.rows.return_value = [("P_E", 0.2), ("AUC", 0.9), ("WAUC", 0.91)]
    return report


def _resources(**kwargs) -> ExperimentResources:
    return ExperimentResources(config=default_experiment("desk"), manifest=MagicMock(), **kwargs)


def test_train_dn_node_records_checkpoint():
    dn_trainer = MagicMock(return_value=_result("run/checkpoints/dn_best.ckpt"))
    resources = _resources(denoiser_trainer=dn_trainer)

    final = train_dn_node(resources)({"run_dir": "run"})

    assert final["dn_checkpoint"] == str(Path("run/checkpoints/dn_best.ckpt"))
    args, kwargs = dn_trainer.call_args
    assert args[1] is resources.config.dn_schedule
    assert kwargs["run_dir"] == "run"


def test_train_mcnet_node_passes_denoiser_and_resume():
    trainer = MagicMock(return_value=_result("run/checkpoints/best.ckpt", best_epoch=7, best_metric=0.125))
    resources = _resources(mcnet_trainer=trainer)

    final = train_mcnet_node(resources)({"run_dir": "run", "dn_checkpoint": "dn.ckpt", "resume": "last.ckpt"})

    assert final["best_epoch"] == 7
    assert final["best_val_pe"] == 0.125
    kwargs = trainer.call_args.kwargs
    assert kwargs["dn_checkpoint"] == "dn.ckpt"
    assert kwargs["resume"] == "last.ckpt"


def test_evaluate_node_without_checkpoint_sets_error():
    evaluator = MagicMock()
    final = evaluate_node(_resources(evaluator=evaluator))({"run_dir": "run", "mcnet_checkpoint": None})
    assert "no checkpoint selected" in final["error"]
    # Evaluator must not run without a checkpoint
    assert not evaluator.called


def test_evaluate_node_reports_metric_errors():
    evaluator = MagicMock(side_effect=MetricError("need at least one cover and one stego sample"))
    final = evaluate_node(_resources(evaluator=evaluator))({"run_dir": "run", "mcnet_checkpoint": "best.ckpt"})
    assert "one cover and one stego" in final["error"]


def test_run_experiment_walks_the_whole_graph(tmp_path):
    dn_trainer = MagicMock(return_value=_result(tmp_path / "dn_best.ckpt"))
    trainer = MagicMock(return_value=_result(tmp_path / "best.ckpt"))
    evaluator = MagicMock(return_value=_report())
    eval_manifest = MagicMock()
    resources = _resources(denoiser_trainer=dn_trainer, mcnet_trainer=trainer, evaluator=evaluator,
                           eval_manifest=eval_manifest)

    final = run_experiment(resources, tmp_path)

    assert dn_trainer.called and trainer.called
    assert trainer.call_args.kwargs["dn_checkpoint"] == str(tmp_path / "dn_best.ckpt")
    assert final["report"] == {"P_E": 0.2, "AUC": 0.9, "WAUC": 0.91}
    args, kwargs = evaluator.call_args
    assert args[1] is eval_manifest
    assert kwargs["out_dir"] == tmp_path / "reports"


def test_failed_denoiser_stops_before_detector(tmp_path):
    trainer = MagicMock()
    resources = _resources(denoiser_trainer=MagicMock(return_value=_result(None)), mcnet_trainer=trainer)
    final = run_experiment(resources, tmp_path)
    assert "denoiser training produced no checkpoint" in final["error"]
    assert not trainer.called
