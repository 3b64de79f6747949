"""Fit-artifact persistence (JSON, schema format_version "1").

Floats serialize via repr, so a save/load round trip reproduces every
downstream EBF and criteria value bit-exactly.  Matrices are row-major with
explicit dimensions; draws are optional and may be thinned at save time
(the artifact then IS the fit: reloading reproduces whatever was stored).
"""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np

from .bayes import McmcConfig, PosteriorFit
from .classical import FittedModel
from .covstruct import Adjacency
from .errors import DataError, UserInputError
from .model import TermInfo, parse_formula

FORMAT_VERSION = "1"


def _matrix(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return {"rows": int(a.shape[0]), "cols": 1, "data": a.tolist(), "vector": True}
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": a.ravel().tolist()}


def _unmatrix(d):
    a = np.array(d["data"], dtype=float)
    if d.get("vector"):
        return a
    return a.reshape(d["rows"], d["cols"])


def _term_to_json(t: TermInfo):
    out = {
        "label": t.label,
        "kind": t.kind,
        "design_columns": list(t.design_columns),
        "n_levels": t.n_levels,
        "levels": list(t.levels),
        "offset": t.offset,
    }
    if t.adjacency is not None:
        out["adjacency"] = t.adjacency.to_lists()
    if t.gp_inputs is not None:
        out["gp_inputs"] = t.gp_inputs.tolist()
    return out


def _term_from_json(d):
    adjacency = None
    if "adjacency" in d:
        adjacency = Adjacency.from_lists([[v - 1 for v in nb] for nb in d["adjacency"]])
    gp_inputs = np.array(d["gp_inputs"], dtype=float) if "gp_inputs" in d else None
    return TermInfo(
        label=d["label"],
        kind=d["kind"],
        design_columns=tuple(d["design_columns"]),
        n_levels=d["n_levels"],
        levels=tuple(d["levels"]),
        offset=d["offset"],
        adjacency=adjacency,
        gp_inputs=gp_inputs,
    )


def save_fit(fit, path, draws: str = "thin", max_draw_rows: int = 1000):
    """Write a FittedModel or PosteriorFit to a JSON artifact.

    ``draws`` is "none", "thin" (default; evenly subsample to
    ``max_draw_rows``) or "full" and only applies to MCMC fits.
    """
    if draws not in ("none", "thin", "full"):
        raise UserInputError(f"draws must be none|thin|full, got {draws!r}")
    doc = {
        "format_version": FORMAT_VERSION,
        "spec_text": fit.spec.render(),
        "family": fit.spec.family,
        "offset_column": fit.spec.offset,
        "terms": [_term_to_json(t) for t in fit.terms],
        "fixed_names": list(fit.fixed_names),
        "gamma": fit.gamma,
        "flags": sorted(fit.flags),
    }
    if isinstance(fit, PosteriorFit):
        doc["method"] = "mcmc"
        doc["phi"] = fit.phi
        doc["theta"] = _matrix(fit.theta_mean)
        doc["omega"] = {"kind": "full", **_matrix(fit.theta_cov)}
        doc["config"] = {
            "chains": fit.config.chains,
            "iterations": fit.config.iterations,
            "burn_in": fit.config.burn_in,
            "thin": fit.config.thin,
            "seed": fit.config.seed,
            "adapt_window": fit.config.adapt_window,
        }
        doc["p"] = fit.p
        doc["q"] = fit.q
        if draws != "none":
            rows = fit.draws
            if draws == "thin" and rows.shape[0] > max_draw_rows:
                keep = np.linspace(0, rows.shape[0] - 1, max_draw_rows).astype(int)
                rows = rows[keep]
            doc["draws"] = {"columns": list(fit.columns), **_matrix(rows)}
    else:
        doc["method"] = fit.method
        doc["phi"] = fit.phi
        doc["theta"] = _matrix(fit.theta)
        if fit.omega_is_diagonal:
            doc["omega"] = {"kind": "diagonal", **_matrix(np.asarray(fit.omega))}
        else:
            doc["omega"] = {"kind": "full", **_matrix(fit.omega)}
        doc["loglik"] = fit.loglik
        doc["n_obs"] = fit.n_obs
        doc["n_params"] = fit.n_params
        doc["var_floor"] = fit.var_floor
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return path


def load_fit(path):
    """Reload an artifact as a FittedModel or PosteriorFit equivalent."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise UserInputError(
            f"artifact format_version {version!r} is not supported (expected {FORMAT_VERSION!r})"
        )
    spec = parse_formula(doc["spec_text"]).with_family(
        doc["family"], offset=doc.get("offset_column")
    )
    terms = tuple(_term_from_json(t) for t in doc["terms"])
    gamma = {k: {p: float(v) for p, v in g.items()} for k, g in doc["gamma"].items()}
    flags = set(doc["flags"])
    if doc["method"] == "mcmc":
        cfg = McmcConfig(**doc["config"])
        if "draws" in doc:
            draws = _unmatrix(doc["draws"])
            columns = tuple(doc["draws"]["columns"])
        else:
            # moments-only artifact: a single pseudo-draw row keeps the
            # PosteriorFit interface alive; cached moments are authoritative
            columns = tuple(
                [f"phi:{n}" for n in doc["fixed_names"]]
                + [f"theta:{i}" for i in range(doc["q"])]
            )
            draws = np.zeros((1, len(columns)))
        fit = PosteriorFit(
            draws=draws,
            columns=columns,
            chains=cfg.chains,
            spec=spec,
            terms=terms,
            fixed_names=tuple(doc["fixed_names"]),
            config=cfg,
            flags=flags,
            p=doc["p"],
            q=doc["q"],
            theta_mean=_unmatrix(doc["theta"]),
            theta_cov=_unmatrix(doc["omega"]),
            phi_mean={k: float(v) for k, v in doc["phi"].items()},
            gamma_mean=gamma,
        )
        return fit
    omega_doc = doc["omega"]
    omega = _unmatrix(omega_doc)
    return FittedModel(
        method=doc["method"],
        phi={k: float(v) for k, v in doc["phi"].items()},
        gamma=gamma,
        theta=_unmatrix(doc["theta"]),
        omega=omega,
        omega_is_diagonal=omega_doc["kind"] == "diagonal",
        loglik=float(doc["loglik"]),
        flags=flags,
        spec=spec,
        terms=terms,
        fixed_names=tuple(doc["fixed_names"]),
        n_obs=int(doc["n_obs"]),
        n_params=int(doc["n_params"]),
        var_floor=float(doc.get("var_floor", 0.0)),
    )
