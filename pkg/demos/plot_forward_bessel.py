"""
Forward model against the analytic disk solution
================================================

On a homogeneous disk with flux ``cos(n theta)`` the photon density is a
modified Bessel function in ``r`` times ``cos(n theta)``. The boundary
trace of the finite-element solution should approach it at second order.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import special

from dotrecon.forward import DEFAULT_K, assemble, measure, solve_forward
from dotrecon.mesh import disk_projection, generate_disk_mesh, refine
from dotrecon.phantom import D_BACKGROUND, MU_BACKGROUND

out = os.environ.get("DOTRECON_OUTPUT", "demo_output")
os.makedirs(out, exist_ok=True)

R = 25.0
n = 2
k = DEFAULT_K

# analytic trace amplitude A I_n(kappa R), kappa^2 = (mu + i k) / D
kap = np.sqrt((MU_BACKGROUND + 1j * k) / D_BACKGROUND)
amp = special.iv(n, kap * R) / (D_BACKGROUND * kap * special.ivp(n, kap * R))

# three meshes, each a uniform refinement of the previous one
meshes = [generate_disk_mesh(R, 541, seed=0)]
for _ in range(2):
    meshes.append(refine(meshes[-1], disk_projection(R)))

errors = []
for mesh in meshes:
    x, y = mesh.nodes[mesh.boundary_nodes].T
    theta = np.arctan2(y, x)
    system = assemble(mesh, D_BACKGROUND, k=k, mu=MU_BACKGROUND)
    g = measure(solve_forward(system, np.cos(n * theta)), mesh)
    ref = amp * np.cos(n * theta)
    errors.append(np.linalg.norm(g - ref) / np.linalg.norm(ref))
    print(f"{mesh.n_triangles:6d} triangles  relative trace error {errors[-1]:.2e}")

print("error ratios under refinement:", np.round(np.array(errors[:-1]) / errors[1:], 2))

# trace on the finest mesh against the analytic curve
order = np.argsort(theta)
fig, ax = plt.subplots(figsize=(6, 3.5))
ax.plot(theta[order], ref.real[order], "k-", label="Bessel, real")
ax.plot(theta[order], g.real[order], "r.", ms=2, label="FEM, real")
ax.plot(theta[order], ref.imag[order], "k--", label="Bessel, imag")
ax.plot(theta[order], g.imag[order], "b.", ms=2, label="FEM, imag")
ax.set_xlabel("boundary angle (rad)")
ax.set_ylabel("photon density")
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(out, "forward_bessel.png"))
print("figure written to", os.path.join(out, "forward_bessel.png"))
