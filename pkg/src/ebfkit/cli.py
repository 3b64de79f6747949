"""Command-line interface.

Exit codes: 0 success, 2 user error (bad flags, formulas, columns, terms),
3 numerical failure.  All outputs are deterministic given inputs and seeds.
"""

from __future__ import annotations

import csv as csv_mod
import json
import sys

import click

from . import artifact as artifact_mod
from . import criteria as crit
from .bayes import McmcConfig, PosteriorFit, diagnostics, gibbs_lmm, mwg_glmm
from .classical import fit_lmm, with_diagonal_omega
from .covstruct import Adjacency
from .ebf import ebf_for_term, ebf_joint
from .errors import NumericalError, UserInputError
from .model import parse_formula, read_csv, validate
from .simulate import SimGrid, SimResult, pvalue_study_chibar, run_grid

FAMILY_CHOICES = click.Choice(["gaussian-identity", "bernoulli-logit", "poisson-log"])


@click.group()
def cli():
    """Mixed-model fitting and empirical Bayes factors for random effects."""


def _load_model(data_path, model_text, family, offset):
    data = read_csv(data_path)
    spec = parse_formula(model_text).with_family(family, offset=offset)
    return data, spec


def _fit(data, spec, method, adjacency, seed, chains, iterations, burn_in, thin,
         car_alpha, estimate_car_alpha, omega):
    if method in ("ml", "reml"):
        fit = fit_lmm(spec, data, objective=method, adjacency=adjacency)
        if omega == "diagonal":
            fit = with_diagonal_omega(fit)
        return fit
    config = McmcConfig(chains=chains, iterations=iterations, burn_in=burn_in,
                        thin=thin, seed=seed)
    sampler = gibbs_lmm if spec.family == "gaussian-identity" else mwg_glmm
    return sampler(spec, data, config, adjacency=adjacency, car_alpha=car_alpha,
                   estimate_car_alpha=estimate_car_alpha)


@cli.command("fit")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_text", required=True)
@click.option("--family", type=FAMILY_CHOICES, default="gaussian-identity", show_default=True)
@click.option("--offset", default=None, help="log-scale additive offset column")
@click.option("--method", type=click.Choice(["ml", "reml", "mcmc"]), default="reml",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--chains", type=int, default=4, show_default=True)
@click.option("--iterations", type=int, default=5000, show_default=True)
@click.option("--burn-in", type=int, default=2500, show_default=True)
@click.option("--thin", type=int, default=1, show_default=True)
@click.option("--adjacency", "adjacency_path", default=None, type=click.Path(exists=True),
              help="adjacency file for (1|unit:car) terms")
@click.option("--car-alpha", type=float, default=0.95, show_default=True,
              help="CAR propriety parameter")
@click.option("--estimate-car-alpha", is_flag=True, default=False)
@click.option("--omega", type=click.Choice(["full", "diagonal"]), default="full",
              show_default=True, help="classical uncertainty: full conditional "
              "covariance or the squared-SE diagonal fallback")
@click.option("--draws", type=click.Choice(["none", "thin", "full"]), default="thin",
              show_default=True)
@click.option("--out", "out_path", default="fit.json", show_default=True)
def cmd_fit(data_path, model_text, family, offset, method, seed, chains, iterations,
            burn_in, thin, adjacency_path, car_alpha, estimate_car_alpha, omega,
            draws, out_path):
    """Fit a model and write the fit artifact (JSON)."""
    data, spec = _load_model(data_path, model_text, family, offset)
    report = validate(spec, data)
    for note in report.issues:
        click.echo(f"note: {note}", err=True)
    adjacency = Adjacency.from_file(adjacency_path) if adjacency_path else None
    fit = _fit(data, spec, method, adjacency, seed, chains, iterations, burn_in,
               thin, car_alpha, estimate_car_alpha, omega)
    artifact_mod.save_fit(fit, out_path, draws=draws)
    click.echo(f"model   {spec.render()}")
    click.echo(f"family  {spec.family}   method {method}")
    click.echo(f"fixed effects / dispersion:")
    for name, value in fit.phi.items():
        click.echo(f"  {name:24s} {value: .6g}")
    click.echo("covariance parameters:")
    for label, g in fit.gamma.items():
        for pname, value in g.items():
            click.echo(f"  {label}:{pname:18s} {value: .6g}")
    if isinstance(fit, PosteriorFit) and fit.chains >= 2:
        diag = diagnostics(fit)
        worst = max(
            (v["rhat"] for v in diag["parameters"].values() if v["rhat"] == v["rhat"]),
            default=float("nan"),
        )
        click.echo(f"max split R-hat: {worst:.4f}   warnings: {len(diag['warnings'])}")
    if fit.flags:
        click.echo(f"flags: {', '.join(sorted(fit.flags))}")
    click.echo(f"artifact written to {out_path}")


@cli.command("ebf")
@click.option("--fit", "fit_path", required=True, type=click.Path(exists=True))
@click.option("--terms", "terms_opt", default=None,
              help="comma-separated term labels (default: every term)")
@click.option("--joint", "joint_opt", default=None,
              help="comma-separated labels for one joint test")
@click.option("--out", "out_path", default=None, help="write the report JSON here")
def cmd_ebf(fit_path, terms_opt, joint_opt, out_path):
    """Empirical Bayes factors for random-effect terms of a fitted model."""
    fit = artifact_mod.load_fit(fit_path)
    results = []
    if joint_opt:
        results.append(ebf_joint(fit, [t.strip() for t in joint_opt.split(",")]))
    else:
        labels = (
            [t.strip() for t in terms_opt.split(",")]
            if terms_opt
            else [t.label for t in fit.terms]
        )
        results.extend(ebf_for_term(fit, label) for label in labels)
    click.echo(f"{'term':28s} {'log EBF':>12s} {'log10 EBF':>12s}")
    for r in results:
        name = "+".join(r.tested_terms)
        click.echo(f"{name:28s} {r.log_ebf:12.4f} {r.log10_ebf:12.4f}")
        click.echo(f"  components: prior {r.components['half_logdet_prior']:.4f} "
                   f"posterior {r.components['neg_half_logdet_post']:.4f} "
                   f"quadform {r.components['neg_half_quadform']:.4f}")
        if r.flags:
            click.echo(f"  flags: {', '.join(sorted(r.flags))}")
        click.echo(f"  {r.reading}")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"ebf": [r.as_dict() for r in results]}, fh, indent=2)
        click.echo(f"report written to {out_path}")


@cli.command("criteria")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_text", required=True)
@click.option("--model0", "model0_text", default=None,
              help="nested null model for the chi-bar LRT")
@click.option("--family", type=FAMILY_CHOICES, default="gaussian-identity", show_default=True)
@click.option("--offset", default=None)
@click.option("--method", type=click.Choice(["ml", "reml", "mcmc"]), default="ml",
              show_default=True)
@click.option("--cv", "cv_k", type=int, default=None, help="K for K-fold cross-validation")
@click.option("--metric", type=click.Choice(["squared", "absolute"]), default="squared",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--chains", type=int, default=4, show_default=True)
@click.option("--iterations", type=int, default=5000, show_default=True)
@click.option("--burn-in", type=int, default=2500, show_default=True)
@click.option("--adjacency", "adjacency_path", default=None, type=click.Path(exists=True))
@click.option("--out", "out_prefix", default="criteria", show_default=True,
              help="writes <prefix>.json and <prefix>.csv")
def cmd_criteria(data_path, model_text, model0_text, family, offset, method, cv_k,
                 metric, seed, chains, iterations, burn_in, adjacency_path, out_prefix):
    """AIC/BIC (both n conventions), DIC for MCMC fits, chi-bar LRT, K-fold CV."""
    data = read_csv(data_path)
    adjacency = Adjacency.from_file(adjacency_path) if adjacency_path else None
    report = crit.CriteriaReport()

    def cluster_counts(spec):
        out = []
        for rt in spec.random_terms:
            if rt.group != "unit":
                out.append((rt.label, len(data.categorical(rt.group).levels)))
        return out

    fits = {}
    for label, text in [("M1", model_text)] + ([("M0", model0_text)] if model0_text else []):
        spec = parse_formula(text).with_family(family, offset=offset)
        if method == "mcmc":
            config = McmcConfig(chains=chains, iterations=iterations, burn_in=burn_in,
                                seed=seed)
            sampler = gibbs_lmm if family == "gaussian-identity" else mwg_glmm
            fit = sampler(spec, data, config, adjacency=adjacency)
            evaluator = crit.conditional_loglik_evaluator(spec, data, list(fit.columns),
                                                          adjacency=adjacency)
            dic_value, p_dic = crit.dic(fit, evaluator)
            loglik = evaluator(fit.draws.mean(axis=0))
            q = len(fit.fixed_names) + sum(
                len(g) for g in fit.gamma.values()
            ) + (1 if family == "gaussian-identity" else 0)
            report.add_model(f"{label}: {text}", loglik, q, data.n_rows,
                             cluster_counts(spec), dic_value=dic_value, p_dic=p_dic)
        else:
            fit = fit_lmm(spec, data, objective=method, adjacency=adjacency)
            report.add_model(f"{label}: {text}", fit.loglik, fit.n_params, data.n_rows,
                             cluster_counts(spec))
        fits[label] = fit

    if model0_text and method != "mcmc":
        stat, p = crit.lrt_chibar(fits["M1"].loglik, fits["M0"].loglik)
        report.set_lrt(stat, p, [f"M1: {model_text}", f"M0: {model0_text}"])
        click.echo(f"chi-bar LRT: stat={stat:.4f} p={p:.4f}")
    if cv_k is not None:
        spec = parse_formula(model_text).with_family(family, offset=offset)
        err = crit.kfold_cv(spec, data, cv_k, metric=metric, seed=seed)
        report.set_cv(cv_k, metric, err, seed)
        click.echo(f"{cv_k}-fold CV mean {metric} error: {err:.6g}")

    for row in report.rows:
        click.echo(" | ".join(f"{k}={v}" for k, v in row.items()))
    with open(f"{out_prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    with open(f"{out_prefix}.csv", "w", newline="", encoding="utf-8") as fh:
        csv_mod.writer(fh).writerows(report.to_csv_rows())
    click.echo(f"written: {out_prefix}.json, {out_prefix}.csv")


def _read_grid_config(path):
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@cli.command("simulate")
@click.option("--grid", "grid_path", default=None, type=click.Path(exists=True),
              help="TOML/JSON grid configuration (defaults otherwise)")
@click.option("--study", type=click.Choice(["grid", "chibar"]), default="grid",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--reduced", is_flag=True, default=False,
              help="2 chains x 2000 iterations for the Bayesian path")
@click.option("--out", "out_dir", default=".", show_default=True, type=click.Path())
def cmd_simulate(grid_path, study, seed, reduced, out_dir):
    """Synthetic studies: the J x n x tau EBF grid or the chi-bar p-value study."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    if study == "chibar":
        cfg = _read_grid_config(grid_path) if grid_path else {}
        cfg.setdefault("seed", seed)
        table = pvalue_study_chibar(**cfg)
        path = os.path.join(out_dir, "chibar_pvalues.csv")
        keys = list(table[0].keys())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv_mod.writer(fh)
            w.writerow(keys)
            for row in table:
                w.writerow([row[k] for k in keys])
        for row in table:
            click.echo(
                f"N={row['N']}: zero-stat fraction {row['zero_stat_fraction']:.3f}, "
                f"mean p {row['mean_p']:.3f}, KS vs chi2_1 "
                f"p={row['ks_p_vs_chi2_1'] if row['ks_p_vs_chi2_1'] is not None else 'n/a'}"
            )
        click.echo(f"written: {path}")
        return

    cfg = _read_grid_config(grid_path) if grid_path else {}
    mcmc_cfg = cfg.pop("mcmc", {})
    if reduced:
        mcmc_cfg = {"chains": 2, "iterations": 2000, "burn_in": 1000, **mcmc_cfg}
    cfg.setdefault("seed", seed)
    for key in ("J_values", "n_values", "tau11_values"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    grid = SimGrid(mcmc=McmcConfig(**mcmc_cfg), **cfg)
    result = run_grid(grid)
    rows_path = os.path.join(out_dir, "sim_results.csv")
    with open(rows_path, "w", newline="", encoding="utf-8") as fh:
        csv_mod.writer(fh).writerows(result.to_csv_rows())
    panel_path = os.path.join(out_dir, "sim_panels.csv")
    with open(panel_path, "w", newline="", encoding="utf-8") as fh:
        csv_mod.writer(fh).writerows(result.panel_rows())
    click.echo(f"written: {rows_path}, {panel_path}")


@cli.command("report")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_prefix", default="report", show_default=True)
def cmd_report(inputs, out_prefix):
    """Consolidated report (markdown + JSON) from fit artifacts and criteria files."""
    if not inputs:
        raise UserInputError("no inputs given")
    sections = []
    doc = {"fits": [], "criteria": []}
    for path in inputs:
        with open(path, encoding="utf-8") as fh:
            content = json.load(fh)
        if "format_version" in content:
            if content["format_version"] != artifact_mod.FORMAT_VERSION:
                raise UserInputError(
                    f"{path}: artifact format_version {content['format_version']!r} "
                    f"does not match supported {artifact_mod.FORMAT_VERSION!r}"
                )
            fit = artifact_mod.load_fit(path)
            rows = [ebf_for_term(fit, t.label) for t in fit.terms]
            doc["fits"].append({
                "path": path,
                "model": content["spec_text"],
                "method": content["method"],
                "ebf": [r.as_dict() for r in rows],
            })
            lines = [f"## Fit `{content['spec_text']}` ({content['method']})", "",
                     "| term | log EBF | log10 EBF | reading |", "| --- | --- | --- | --- |"]
            for r in rows:
                lines.append(
                    f"| {'+'.join(r.tested_terms)} | {r.log_ebf:.4f} | "
                    f"{r.log10_ebf:.4f} | {r.reading} |"
                )
            sections.append("\n".join(lines))
        elif "models" in content:
            doc["criteria"].append({"path": path, **content})
            lines = [f"## Criteria from `{path}`", ""]
            for row in content["models"]:
                lines.append("- " + ", ".join(f"{k}={v}" for k, v in row.items()))
            sections.append("\n".join(lines))
        else:
            raise UserInputError(f"{path}: not a fit artifact or criteria report")
    md = "# Model report\n\n" + "\n\n".join(sections) + "\n"
    with open(f"{out_prefix}.md", "w", encoding="utf-8") as fh:
        fh.write(md)
    with open(f"{out_prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    click.echo(f"written: {out_prefix}.md, {out_prefix}.json")


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except UserInputError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
