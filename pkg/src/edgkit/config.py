"""Run configuration: one self-contained INI file.

Sections::

    [kernel]        family = constant | product | weight_driven
                    value / alpha / gamma, m_max, optional CSV sequences
    [perturbation]  kind = none | constant | smooth, amplitude, freq
    [initial]       kind = mixture | delta | equilibrium, mixture, k, rho
    [scale]         m, rho, t_final, tol, n_out, l_schedule, nl_schedule,
                    ensembles, m0, n, l, ...
    [output]        dir, seed

Everything an experiment reads comes from this file (plus the CLI seed and
output-directory overrides), so the manifest written next to the outputs is
enough to reproduce a run bitwise.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
from typing import List, Tuple

import numpy as np

from . import kernels
from .metrics import ClusterDistribution


class ConfigError(ValueError):
    pass


_REQUIRED = object()


def _read_csv_column_pairs(path: str) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("index", "k", "n"):
                continue
            out[int(row[0])] = float(row[1])
    return out


@dataclasses.dataclass
class RunConfig:
    path: str
    text: str
    parser: configparser.ConfigParser

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def get(self, section: str, key: str, cast=str, default=_REQUIRED):
        if not self.parser.has_option(section, key):
            if default is _REQUIRED:
                raise ConfigError(f"missing required field [{section}] {key}")
            return default
        raw = self.parser.get(section, key)
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"field [{section}] {key} = {raw!r}: {exc}") from exc

    def get_list(self, section: str, key: str, cast=float, default=_REQUIRED) -> list:
        raw = self.get(section, key, str, default)
        if raw is default and default is not _REQUIRED:
            return default
        try:
            return [cast(tok) for tok in str(raw).replace(";", ",").split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"field [{section}] {key} = {raw!r}: {exc}") from exc

    def get_pairs(self, section: str, key: str, default=_REQUIRED) -> List[Tuple[int, int]]:
        raw = self.get(section, key, str, default)
        if raw is default and default is not _REQUIRED:
            return default
        try:
            return [(int(a), int(b)) for a, b in
                    (tok.split(":") for tok in str(raw).split(",") if tok.strip())]
        except ValueError as exc:
            raise ConfigError(f"field [{section}] {key} = {raw!r}: {exc}") from exc

    # -- builders ----------------------------------------------------------

    def build_kernel(self) -> kernels.KernelSpec:
        fam = self.get("kernel", "family")
        m_max = self.get("kernel", "m_max", int, 64)
        try:
            if fam == "constant":
                return kernels.constant_kernel(self.get("kernel", "value", float, 1.0), m_max)
            if fam == "product":
                if self.parser.has_option("kernel", "a_csv"):
                    a_map = _read_csv_column_pairs(self.get("kernel", "a_csv"))
                    b_map = _read_csv_column_pairs(self.get("kernel", "b_csv"))
                    a = np.array([a_map[k] for k in range(1, m_max + 1)])
                    b = np.array([b_map[k] for k in range(0, m_max + 1)])
                    return kernels.product_kernel(a, b, m_max)
                alpha = self.get("kernel", "alpha", float)
                return kernels.power_product_kernel(alpha, m_max)
            if fam == "weight_driven":
                if self.parser.has_option("kernel", "weights_csv"):
                    w_map = _read_csv_column_pairs(self.get("kernel", "weights_csv"))
                    w = np.array([w_map[k] for k in range(0, m_max + 1)])
                    return kernels.weight_driven_kernel(w, m_max)
                gamma = self.get("kernel", "gamma", float)
                return kernels.power_law_weight_kernel(gamma, m_max)
        except KeyError as exc:
            raise ConfigError(f"kernel sequence file missing index {exc}") from exc
        raise ConfigError(f"field [kernel] family = {fam!r}: unknown family")

    def build_perturbation(self) -> kernels.Perturbation:
        kind = self.get("perturbation", "kind", str, "none")
        if kind == "none":
            return kernels.no_perturbation()
        amp = self.get("perturbation", "amplitude", float)
        if kind == "constant":
            return kernels.constant_perturbation(amp)
        if kind == "smooth":
            return kernels.smooth_perturbation(amp, self.get("perturbation", "freq", float, 1.0))
        raise ConfigError(f"field [perturbation] kind = {kind!r}: unknown kind")

    def build_initial(self, m: int, weight_table=None) -> ClusterDistribution:
        kind = self.get("initial", "kind", str, "mixture")
        if kind == "delta":
            k = self.get("initial", "k", int)
            if not 0 <= k <= m:
                raise ConfigError(f"field [initial] k = {k}: outside window 0..{m}")
            p = np.zeros(m + 1)
            p[k] = 1.0
            return ClusterDistribution(p, copy=False)
        if kind == "mixture":
            raw = self.get("initial", "mixture")
            p = np.zeros(m + 1)
            for tok in raw.split(","):
                k_s, w_s = tok.split(":")
                k = int(k_s)
                if not 0 <= k <= m:
                    raise ConfigError(f"field [initial] mixture: size {k} outside window")
                p[k] += float(w_s)
            if abs(p.sum() - 1.0) > 1e-9:
                raise ConfigError("field [initial] mixture: masses must sum to 1")
            return ClusterDistribution(p, copy=False)
        if kind == "equilibrium":
            if weight_table is None:
                raise ConfigError("[initial] kind = equilibrium needs a kernel weight table")
            from .equilibrium import equilibrium_measure
            rho = self.get("initial", "rho", float)
            return equilibrium_measure(weight_table.truncate(m), rho=rho).dist
        raise ConfigError(f"field [initial] kind = {kind!r}: unknown kind")


def load_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            text = fh.read()
        parser.read_string(text, source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return RunConfig(path, text, parser)
