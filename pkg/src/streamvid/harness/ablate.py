"""Multi-depth versus final-layer features under one seed."""
from __future__ import annotations

from .. import metrics as Mx
from .evaluate import METRIC_DIRECTIONS, evaluate
from .train import train

ABLATION_MODES = ("multi_depth", "final_layer")
DELTA_ROW = "delta"


def run_ablation(cfg, on_step=None, features=None):
    """Train and evaluate both feature modes with every other setting shared.

    ``features`` optionally supplies ``(train, eval)`` encoder features in
    place of the config's synthetic splits.

    Returns ``(table, histories)``: the table has one row per mode plus a
    ``delta`` row (multi_depth minus final_layer, raw difference per metric),
    and ``histories`` maps each mode to its training log.
    """
    results, histories = {}, {}
    for mode in ABLATION_MODES:
        run_cfg = cfg.replace(feature_mode=mode)
        train_feats, eval_feats = features if features is not None else (None, None)
        ckpt, history = train(run_cfg, features=train_feats,
                              on_step=(lambda r, m=mode: on_step(m, r)) if on_step else None)
        results[mode] = evaluate(ckpt, run_cfg.readout_mode, features=eval_feats)
        histories[mode] = history
    columns = list(results[ABLATION_MODES[0]])
    table = Mx.MetricTable({c: METRIC_DIRECTIONS[c] for c in columns})
    for mode in ABLATION_MODES:
        table.add_row(mode, results[mode])
    table.add_row(DELTA_ROW, {c: results["multi_depth"][c] - results["final_layer"][c] for c in columns})
    return table, histories


def delta_favours_multi_depth(table):
    """Per metric, whether the delta points the better way (logged, never asserted)."""
    delta = table.rows[DELTA_ROW]
    return {c: (delta[c] > 0) if table.directions[c] == Mx.HIGHER else (delta[c] < 0) for c in delta}
