"""Lead-time evaluation: RMSE/ACC of rolled-out forecasts over a test split."""

from __future__ import annotations

import numpy as np

from .gridio import Dataset, GridField
from .metrics import Climatology, WeightTable, acc, lat_weights, rmse


def eval_initial_times(dataset: Dataset, split: str, lead_h: int, episodes: int,
                       seed: int) -> list:
    """Deterministic sample of initial timestamps with room for the lead."""
    lo, hi = dataset.splits[split]
    step_h = dataset.spec.base_step_hours
    last_valid = hi - 1 - lead_h // step_h
    if last_valid < lo:
        raise ValueError(f"split {split!r} too short for lead {lead_h}h")
    rng = np.random.default_rng([seed, lead_h])
    idxs = sorted(int(i) for i in rng.choice(np.arange(lo, last_valid + 1),
                                             size=min(episodes, last_valid + 1 - lo),
                                             replace=False))
    return [dataset.fields[i].timestamp_hours for i in idxs]


def evaluate_leads(forecast_fn, dataset: Dataset, split: str, leads, episodes: int,
                   seed: int, climatology: Climatology | None = None,
                   weights: WeightTable | None = None) -> list:
    """Score a forecaster at several lead times.

    forecast_fn(x0: GridField, lead_h) must return the predicted GridField at
    x0.timestamp + lead_h. Returns rows of
    (variable name, lead_hours, rmse, acc) averaged over initial times.
    """
    weights = weights or lat_weights(dataset.spec)
    climatology = climatology or Climatology.from_dataset(dataset, "train")
    names = dataset.meta.get("variables") or [f"var{v}" for v in range(dataset.spec.num_vars)]
    rows = []
    for lead in leads:
        preds, truths, clims = [], [], []
        for t0 in eval_initial_times(dataset, split, lead, episodes, seed):
            x0 = dataset.at(t0)
            pred = forecast_fn(x0, lead)
            truth = dataset.at(t0 + lead)
            preds.append(pred.values)
            truths.append(truth.values)
            clims.append(climatology.at(t0 + lead))
        p = np.stack(preds)
        t = np.stack(truths)
        c = np.stack(clims)
        accs = acc(p, t, c, weights)
        for v, name in enumerate(names):
            r = rmse(p[:, v : v + 1], t[:, v : v + 1], weights)
            rows.append((name, int(lead), r, float(accs[v])))
    return rows


def model_forecast_fn(model, policy_decompose):
    """Adapt a model + lead->intervals decomposition to the evaluate_leads protocol."""

    def forecast(x0: GridField, lead_h: int) -> GridField:
        return model.predict_rollout(x0, policy_decompose(lead_h), lead_hours=lead_h)[-1]

    return forecast
