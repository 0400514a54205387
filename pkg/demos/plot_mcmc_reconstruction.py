"""
Pilot adaptive Metropolis reconstruction
========================================

The posterior combines a Gaussian likelihood with a total-variation prior on
the background-normalized absorption and scattering. A short Gauss-Newton
run supplies the starting state; the proposal covariance is rescaled every
``m`` iterations during the pilot phase and then frozen. The estimate is the
sample mean after burn-in.

Pass ``--fast`` for the 25000-iteration profile (about a minute and a half);
the default here is the short debug profile.
"""

import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dotrecon import harness, mcmc

out = os.environ.get("DOTRECON_OUTPUT", "demo_output")
profile = "fast" if "--fast" in sys.argv else "debug"

cfg = harness.ExperimentConfig.load(os.path.join(os.path.dirname(__file__), "..", "configs", "desk.yaml"))
cfg = cfg.replace(**{"mcmc.profile": profile, "output": os.path.join(out, f"mcmc_{profile}")})

sim = harness.simulate(cfg)
field, meta, chain = harness.reconstruct(sim, cfg)
print("post-pilot acceptance", round(meta["acceptance_post_pilot"], 3),
      "; final proposal scale", round(meta["proposal_scale_final"], 3), "x initial")

# errors against the truth transferred to the reconstruction mesh
for p in (1, 2):
    print(f"mu L{p} {harness.relative_error(sim.truth, field, p, 'mu'):.4f}   "
          f"D L{p} {harness.relative_error(sim.truth, field, p, 'D'):.4f}")
print("localization", harness.localization(field, sim.truth, sim.background[1]))

rep = mcmc.diagnostics(chain, max_coordinates=50)
print(rep.summary())

# acceptance trace and the log posterior along the chain
s = chain.schedule
fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
x = np.arange(1, len(rep.acceptance_trace) + 1) * rep.window
axes[0].plot(x, rep.acceptance_trace, lw=0.8)
axes[0].axhline(chain.a_o, color="k", ls="--", lw=0.8)
axes[0].set_ylabel("acceptance")
axes[1].plot(np.arange(len(chain.log_target)), chain.log_target, lw=0.6)
axes[1].set_ylabel("log posterior")
axes[1].set_xlabel("iteration")
for ax in axes:
    ax.axvline(s.pilot, color="g", lw=0.8)
    ax.axvline(s.B, color="r", lw=0.8)
fig.tight_layout()
os.makedirs(cfg.output_dir(), exist_ok=True)
fig.savefig(cfg.output_dir() / "chain_trace.png")

harness.export_field(sim.truth, cfg.output_dir() / "truth")
harness.export_field(field, cfg.output_dir() / "recon")
print("figures in", cfg.output_dir())
