"""Static parameter / FLOP accounting.

Counting convention ("thop-compatible"): one unit per multiply-accumulate
in conv and linear layers, two units per output element of batch norm,
nothing for activations, pooling, softmax, or elementwise adds.  Linear
biases add parameters but no FLOPs.  FLOPs are reported per batch.

Scoring FLOPs of AFI modules are charged under an *arity ledger*:
``"paper"`` uses the closed-form accounting (scoring arities 2..N in a
table-2 stage), ``"runtime"`` the arities the built network actually
executes.  Under the paper-text preset the two coincide.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .afi import bottleneck_width
from .architectures import BlockSpec, Network, NetworkConfig, plan
from .errors import ConfigError
from .tensor import Tensor, count_costs, no_grad

CONVENTION = "thop-compatible"
LEDGERS = ("paper", "runtime")

# published whole-network figures (CIFAR-100 head, r=4) used for cross-checks
REFERENCE_TOTALS = {
    ("ResNet", 32): (472.76e3, 2.23e9),
    ("AFI-ResNet", 32): (378.23e3, 1.78e9),
    ("ResNet", 110): (1.74e6, 8.17e9),
    ("AFI-ResNet", 110): (1.35e6, 6.23e9),
}


@dataclass
class CostRow:
    scope: str
    params: int
    flops: int


@dataclass
class CostTable:
    rows: list[CostRow]
    batch: int
    convention: str = CONVENTION
    ledger: str = "paper"
    notes: list[str] = field(default_factory=list)

    def row(self, scope: str) -> CostRow:
        for r in self.rows:
            if r.scope == scope:
                return r
        raise KeyError(scope)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def stage_rows(self) -> list[CostRow]:
        return [r for r in self.rows if r.scope.startswith("stage")]


def _conv(cin, cout, k, groups, area):
    p = k * k * (cin // groups) * cout
    return p, p * area


def _bn(c, area):
    return 2 * c, 2 * c * area


def _out_hw(hw, k, stride):
    return (hw + 2 * (k // 2) - k) // stride + 1


def block_cost(spec: BlockSpec, hw_in: int, r: int = 4, ledger: str = "paper") -> tuple[int, int, int]:
    """(params, per-sample FLOPs, output spatial size) of one block."""
    if ledger not in LEDGERS:
        raise ConfigError(f"unknown arity ledger {ledger!r}")
    cin, C = spec.in_channels, spec.channels
    terms = []
    if spec.kind == "afi-mbv2":
        half, wide = spec.half, 2 * spec.half
        hw_out = _out_hw(hw_in, 3, spec.stride)
        a_in, a_out = hw_in * hw_in, hw_out * hw_out
        terms += [_conv(cin, half, 1, 1, a_in), _bn(half, a_in),
                  _conv(wide, wide, 3, wide, a_out), _bn(wide, a_out),
                  _conv(wide, C, 1, 1, a_out), _bn(C, a_out)]
    else:
        hw_out = _out_hw(hw_in, 3, spec.stride)
        a = hw_out * hw_out
        mid = C if spec.kind == "standard" else spec.half
        k2_in = C if spec.kind == "standard" else 2 * spec.half
        terms += [_conv(cin, mid, 3, 1, a), _bn(mid, a), _conv(k2_in, C, 3, 1, a), _bn(C, a)]
        if spec.projection:
            terms += [_conv(cin, C, 1, 1, a), _bn(C, a)]
    if spec.has_afi:
        cb = bottleneck_width(spec.half, r)
        arity = spec.ledger_arity if ledger == "paper" else spec.afi_input_arity
        terms.append((2 * spec.half * cb, 2 * arity * spec.half * cb))
    return sum(p for p, _ in terms), sum(f for _, f in terms), hw_out


def cost_table(config: NetworkConfig, batch: int = 32, ledger: str = "paper") -> CostTable:
    hw = config.image_size
    c0 = config.stage_channels[0]
    sp, sf = map(sum, zip(_conv(config.in_channels, c0, 3, 1, hw * hw), _bn(c0, hw * hw)))
    rows = [CostRow("stem", sp, sf * batch)]
    for s, specs in enumerate(plan(config), start=1):
        p = f = 0
        for spec in specs:
            bp, bf, hw = block_cost(spec, hw, config.r, ledger)
            p += bp
            f += bf
        rows.append(CostRow(f"stage{s}", p, f * batch))
    cl, k = config.stage_channels[-1], config.num_classes
    rows.append(CostRow("head", cl * k + k, cl * k * batch))
    return CostTable(rows, batch, ledger=ledger)


def count_params(config: NetworkConfig) -> CostTable:
    return cost_table(config, batch=1)


def count_flops(config: NetworkConfig, batch: int = 32, ledger: str = "paper") -> CostTable:
    return cost_table(config, batch=batch, ledger=ledger)


def scoring_flops_closed_form(n: int, channels: int, r: int) -> int:
    """Scoring multiplications of one stage with n AFI-bearing positions:
    ``C * Cb * (n + 2) * (n - 1)`` (``C**2 / r`` when r divides C)."""
    if n < 2:
        return 0
    return channels * bottleneck_width(channels, r) * (n + 2) * (n - 1)


def runtime_costs(network: Network, batch: int = 32) -> CostTable:
    """Enumerate costs by walking a built network: parameters from its
    actual tensors, FLOPs from the ops a single-sample forward pass runs."""
    cfg = network.config
    params: dict[str, int] = {}
    for name, t in network.named_parameters():
        scope = name.split(".", 1)[0]
        params[scope] = params.get(scope, 0) + t.size
    x = Tensor(np.zeros((1, cfg.in_channels, cfg.image_size, cfg.image_size)))
    was_training = network.training
    network.eval()
    try:
        with no_grad(), count_costs() as counter:
            network(x)
    finally:
        network.training = was_training
    scopes = ["stem"] + [f"stage{s}" for s in range(1, len(cfg.stage_channels) + 1)] + ["head"]
    rows = [CostRow(s, params.get(s, 0), counter.flops.get(s, 0) * batch) for s in scopes]
    return CostTable(rows, batch, ledger="runtime")


# ----------------------------------------------------------------------------
# presentation


def humanize(value: int | float, unit: str | None = None) -> str:
    """K/M/G = 1e3/1e6/1e9 with two decimals, rounding half up."""
    units = {"": 1, "K": 10**3, "M": 10**6, "G": 10**9}
    if unit is None:
        unit = "G" if value >= 1e9 else "M" if value >= 1e6 else "K" if value >= 1e3 else ""
    if unit == "":
        return str(int(value))
    q = (Decimal(int(value)) / Decimal(units[unit])).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{q}{unit}"


HEADER = ["scope", "params_a", "flops_a", "params_b", "flops_b", "dparams", "dflops"]


def compare_rows(a: CostTable, b: CostTable) -> list[list]:
    out = []
    for ra in a.rows:
        rb = b.row(ra.scope)
        out.append([ra.scope, ra.params, ra.flops, rb.params, rb.flops,
                    rb.params - ra.params, rb.flops - ra.flops])
    out.append(["total", a.params, a.flops, b.params, b.flops, b.params - a.params, b.flops - a.flops])
    return out


def _signed(v: int) -> str:
    return ("-" if v < 0 else "") + humanize(abs(v))


def compare_report(config_a: NetworkConfig, config_b: NetworkConfig, batch: int = 32,
                   ledger: str = "paper") -> tuple[str, str]:
    """Raw-integer CSV and humanized CSV comparing two configurations."""
    rows = compare_rows(cost_table(config_a, batch, ledger), cost_table(config_b, batch, ledger))
    raw, human = io.StringIO(), io.StringIO()
    w_raw = csv.writer(raw, lineterminator="\n")
    w_hum = csv.writer(human, lineterminator="\n")
    w_raw.writerow(HEADER)
    w_hum.writerow(HEADER)
    for row in rows:
        w_raw.writerow(row)
        w_hum.writerow([row[0]] + [humanize(v) for v in row[1:5]] + [_signed(v) for v in row[5:]])
    return raw.getvalue(), human.getvalue()


def model_name(config: NetworkConfig) -> str:
    return ("AFI-ResNet" if config.afi_stages else "ResNet") + f"-{config.depth}"


def discrepancy_notes(config: NetworkConfig, table: CostTable) -> list[str]:
    """Flag whole-network totals that do not round to the published figures (only for the CIFAR-100, r=4, all-stage setups)."""
    full = config.afi_stages in (frozenset(), frozenset({1, 2, 3}))
    if config.num_classes != 100 or config.r != 4 or not full or table.batch != 32:
        return []
    if config.afi_stages and config.preset != "table-2":
        return []
    key = ("AFI-ResNet" if config.afi_stages else "ResNet", config.depth)
    if key not in REFERENCE_TOTALS:
        return []
    notes = []
    for what, got, ref in (("params", table.params, REFERENCE_TOTALS[key][0]),
                           ("FLOPs", table.flops, REFERENCE_TOTALS[key][1])):
        unit = humanize(ref)[-1]
        scale = {"K": 1e3, "M": 1e6, "G": 1e9}[unit]
        # anything that does not round to the printed two decimals
        if abs(got / scale - ref / scale) > 0.005 + 1e-9:
            notes.append(f"note: {model_name(config)} {what} enumerate to {got:,} ({humanize(got)}); "
                         f"the published figure is {humanize(ref)} ({(got - ref) / ref:+.1%}). "
                         f"The published value is not reproducible under these counting rules.")
    return notes
