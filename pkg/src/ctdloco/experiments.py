"""End-to-end analysis pipelines shared by the CLI and the acceptance suite."""

import dataclasses

import numpy as np

from . import perturbation as pl
from .fixed_points import FixedPointFinder, unforced_rollout
from .policy import PolicyNet, recurrent_jacobian
from .trainer import TrainConfig, train


def fixed_point_catalogue(net, states, n_inits=128, lr=0.01, max_iters=20000, q_tol=1e-10,
                          merge_radius=0.1, tol_marginal=0.005, inflate=0.25, seed=0):
    """Fit a :class:`FixedPointFinder` with initial states drawn around ``states``."""
    finder = FixedPointFinder(net, None, n_inits, lr, max_iters, q_tol, merge_radius,
                              tol_marginal, inflate, seed)
    return finder.fit(states)


def decay_from(net, x, report, steps=200, eps=0.1):
    """Unforced trajectory from the fixed point nudged along its leading eigenvector."""
    J_vals, J_vecs = np.linalg.eig(recurrent_jacobian(net, report.state, x))
    lead = np.real(J_vecs[:, np.argmax(np.abs(J_vals))])
    lead /= np.linalg.norm(lead)
    return unforced_rollout(net, x, report.state + eps * lead, steps)


def phase_contrast(net, env_cfg, basis, magnitude=2.0, steps=800, seed=0, far_pc=4):
    """PC1 pushes at the most and least tangential phases, plus a PC``far_pc`` push.

    Returns a dict of :class:`TracePair` keyed ``"pc1_tangential"``,
    ``"pc1_orthogonal"`` and ``f"pc{far_pc}_tangential"``; the far-PC push is
    applied at the same step as the tangential PC1 push.
    """
    t_tan, t_orth, _ = pl.tangential_and_orthogonal_times(net, env_cfg, basis, 1, seed=seed)
    out = {}
    for key, pc, t in (("pc1_tangential", 1, t_tan), ("pc1_orthogonal", 1, t_orth),
                       (f"pc{far_pc}_tangential", far_pc, t_tan)):
        spec = pl.NeuralPerturbationSpec(pc, magnitude, t)
        out[key] = pl.neural_perturbation_experiment(net, env_cfg, basis, spec, steps, seed)
    return out


def compare_truncation(env_cfg, base_cfg=None, k_values=(4, 16), n_agents=100,
                       magnitudes=None, durations=(100.0, 200.0), master_seed=0, n_jobs=1,
                       nets=None):
    """Train one model per truncation length with matched seed and budget, then grid them.

    Returns ``(table, nets)`` where ``table`` has one row per k with the
    summed recovery fraction over the grid.
    """
    base_cfg = base_cfg or TrainConfig()
    nets = dict(nets or {})
    table = []
    for k in k_values:
        if k not in nets:
            cfg = dataclasses.replace(base_cfg, k_trunc=k)
            init = PolicyNet.random(cfg.policy_dims(), seed=cfg.seed)
            nets[k], _ = train(init, env_cfg, cfg)
        rows = pl.robustness_grid(nets[k], env_cfg, magnitudes, durations, n_agents,
                                  master_seed, n_jobs)
        table.append({
            "k_trunc": k,
            "recovery_area": float(sum(r["fraction"] for r in rows)),
            "cells": len(rows),
            "trials": int(sum(r["n_agents"] for r in rows)),
            "grid": rows,
        })
    return table, nets
