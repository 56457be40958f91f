"""One-shot distributed logistic regression across three heterogeneous sites.

Site 1 (the lead) observes (X1, X2, y), site 2 observes (X1, X3, y) and site 3
observes (X2, X3, y); nobody observes all three covariates together with the
outcome. Each site also holds an outcome-free reference sample of all
covariates. The covariate laws differ between sites (benchmark Setting 4).

Sites 2 and 3 each send exactly one message: their reduced-model fit plus a
Clayton-copula summary of their reference sample. The lead combines these
with its own data into a density-ratio tilted GMM estimate of the full model.

Run:  python3 demos/01_one_shot_pipeline.py
"""

import numpy as np

from tiltgmm import simulation as sim
from tiltgmm.protocol import decode_payload, encode_payload, lead_aggregate, site_export


def show(label, result):
    ci = result.confidence_intervals()
    print(f"\n{label}")
    print(f"  {'parameter':<12}{'truth':>8}{'estimate':>10}{'se':>8}   95% interval")
    for name, truth, b, se, (lo, hi) in zip(result.param_names, sim.BETA_TRUE, result.beta_hat,
                                            result.standard_errors, ci):
        print(f"  {name:<12}{truth:>8.2f}{b:>10.3f}{se:>8.3f}   [{lo:6.3f}, {hi:6.3f}]")


def main():
    setting = sim.make_setting(4)
    data, _ = sim.generate_replicate(setting, root_seed=2024, rep=0)
    specs = sim.reduced_specs(setting)
    grid = sim.default_grid_config()

    for j, (study, ref) in enumerate(data):
        print(f"{sim.SITE_IDS[j]}: study columns {list(study.columns)}, n={len(study)}; "
              f"P(X1=1) in reference sample = {ref.X1.mean():.2f}")

    # --- at the external sites -------------------------------------------
    wire = []
    for j in (1, 2):
        payload = site_export(data[j][0], data[j][1], specs[j], sim.SITE_IDS[j], grid)
        raw = encode_payload(payload)
        wire.append(raw)
        alphas = ", ".join(f"{a:.2f}" for a in payload.density.copula.alpha_hat)
        print(f"\n{payload.site_id} sends {len(raw)} bytes: theta_hat="
              f"{np.round(payload.fit.theta_hat, 3)}, {payload.density.n_values} CDF values, "
              f"Clayton alpha per X1 stratum = [{alphas}]")

    # --- at the lead site ----------------------------------------------------
    payloads = [decode_payload(raw) for raw in wire]
    study, ref = data[0]
    tilted = lead_aggregate(study, ref, specs[0], payloads, sim.main_spec(), grid_config=grid)
    plain = lead_aggregate(study, ref, specs[0], payloads, sim.main_spec(), grid_config=grid,
                           tilt=False)
    show("density-ratio tilted GMM (dist-GMM-C)", tilted)
    show("same moments without tilting (GENMETA)", plain)

    d = tilted.diagnostics
    print(f"\npayloads consumed: {d['payloads_consumed']}; weight iterations: "
          f"{d['weight_iterations']}; sandwich identity gap: {d['sandwich_identity_rtol']:.1e}")


if __name__ == "__main__":
    main()
