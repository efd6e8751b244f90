"""Regenerate the bundled synthetic stand-in datasets under data/.

The CSVs mimic the shapes of classic longitudinal benchmarks (binary
panel responses, seizure counts, a daily returns series) but every value
is drawn from the corresponding generative model with a fixed seed, so
the files carry no licensing restrictions and rebuild byte-identically.
"""

import os

import numpy as np
import pandas as pd
from scipy.special import expit

OUT = os.path.join(os.path.dirname(__file__), "..", "data")


def panel_binary(path, n_subjects, n_visits, seed, intercept, group_effects,
                 visit_effect, re_sd, visit_values=None):
    rng = np.random.default_rng(seed)
    rows = n_subjects * n_visits
    subject = np.repeat(np.arange(n_subjects), n_visits)
    visits = np.asarray(visit_values if visit_values is not None
                        else np.arange(n_visits), dtype=float)
    visit = np.tile(visits, n_subjects)
    frame = pd.DataFrame({"subject": subject, "visit": visit})
    eta = intercept + visit_effect * visit
    for name, (prob, coef) in group_effects.items():
        col = rng.binomial(1, prob, n_subjects)[subject]
        frame[name] = col
        eta = eta + coef * col
    b = re_sd * rng.standard_normal(n_subjects)
    frame["y"] = (rng.random(rows) < expit(eta + b[subject])).astype(int)
    frame = frame[["y", "subject"] + list(group_effects) + ["visit"]]
    frame.to_csv(path, index=False, lineterminator="\n")
    return frame


def seizure_counts(path, n_patients, n_visits, seed):
    rng = np.random.default_rng(seed)
    subject = np.repeat(np.arange(n_patients), n_visits)
    visit = np.tile(np.arange(1, n_visits + 1), n_patients).astype(float)
    base = np.round(np.exp(rng.normal(2.8, 0.7, n_patients))).astype(int)
    trt = rng.binomial(1, 0.5, n_patients)
    b = 0.5 * rng.standard_normal(n_patients)
    eta = (-0.3 + 0.9 * np.log(base[subject] / 4.0) - 0.3 * trt[subject]
           - 0.05 * visit + b[subject])
    y = rng.poisson(np.exp(eta))
    frame = pd.DataFrame({
        "y": y, "patient": subject, "base": base[subject],
        "lbase": np.log(base[subject] / 4.0),
        "trt": trt[subject], "visit": visit,
    })
    frame.to_csv(path, index=False, lineterminator="\n")
    return frame


def returns_series(path, n, seed):
    from skewvi.models import synthesize_sv

    spec, _ = synthesize_sv(n, sigma=0.35, phi=0.97, kappa=-0.6, seed=seed)
    pd.DataFrame({"y": spec.y}).to_csv(path, index=False, lineterminator="\n")


def main():
    os.makedirs(OUT, exist_ok=True)
    # 537 subjects x 4 annual visits, binary respiratory outcome
    panel_binary(os.path.join(OUT, "wheeze.csv"), 537, 4, seed=11,
                 intercept=-1.8, group_effects={"smoke": (0.4, 0.35)},
                 visit_effect=-0.12, re_sd=1.6,
                 visit_values=[-2.0, -1.0, 0.0, 1.0])
    # 500 subjects x 7 annual observations, binary medication indicator
    panel_binary(os.path.join(OUT, "medication.csv"), 500, 7, seed=12,
                 intercept=-1.2, group_effects={"male": (0.5, 0.6)},
                 visit_effect=0.08, re_sd=1.9)
    # 59 patients x 4 clinic visits, seizure counts
    seizure_counts(os.path.join(OUT, "seizures.csv"), 59, 4, seed=13)
    # length-2000 artificial daily returns
    returns_series(os.path.join(OUT, "returns.csv"), 2000, seed=14)
    print(f"datasets written to {os.path.abspath(OUT)}")


if __name__ == "__main__":
    main()
