#!/usr/bin/env python3
"""Builds the shipped case files under data/ from the MATPOWER distribution.

    python3 tools/prepare_cases.py <matpower>/data data/

Outputs:
  case57.m          verbatim copy of the MATPOWER IEEE 57-bus case
  case33bw.m        Baran & Wu 33-bus feeder with loads in MW and impedances in
                    p.u. (the upstream file converts kW/ohm with MATLAB code that
                    the M-file subset parser does not execute)
  itd_case.m        57-bus transmission grid with two 33-bus feeders attached
  itd_regions.txt   bus -> region map (0 = transmission, 1..2 = feeders)
"""
import re
import shutil
import sys
from pathlib import Path

# Feeder head transformers, connection convention used for the merged case.
TRAFO = dict(r=0.0, x=0.00623, b=0.0, ratio=0.985, angle=0.0)
FEEDER_CONNECTIONS = [9, 38]   # transmission buses feeding feeder 1 and 2
FEEDER_OFFSET = 100            # feeder d bus b -> d * FEEDER_OFFSET + b


def read_matrix(text, name):
    m = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S)
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";").strip()
        if line:
            rows.append([float(t) for t in line.split()])
    return rows


def read_base(text):
    return float(re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text).group(1))


def fmt(v):
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_case(path, name, base, bus, gen, branch, gencost, header):
    out = [f"function mpc = {name}", *[f"%{h}" for h in header], "",
           "mpc.version = '2';", f"mpc.baseMVA = {fmt(base)};", "",
           "%% bus data",
           "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
           "mpc.bus = ["]
    out += ["\t" + "\t".join(fmt(v) for v in r) + ";" for r in bus]
    out += ["];", "", "%% generator data",
            "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin",
            "mpc.gen = ["]
    out += ["\t" + "\t".join(fmt(v) for v in r[:10]) + ";" for r in gen]
    out += ["];", "", "%% branch data",
            "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax",
            "mpc.branch = ["]
    out += ["\t" + "\t".join(fmt(v) for v in r[:13]) + ";" for r in branch]
    out += ["];", "", "%% generator cost data", "mpc.gencost = ["]
    out += ["\t" + "\t".join(fmt(v) for v in r) + ";" for r in gencost]
    out += ["];", ""]
    Path(path).write_text("\n".join(out))


def convert_33bw(text):
    base = read_base(text)
    bus = read_matrix(text, "bus")
    branch = read_matrix(text, "branch")
    gen = read_matrix(text, "gen")
    gencost = read_matrix(text, "gencost")
    vbase = bus[0][9] * 1e3
    zbase = vbase ** 2 / (base * 1e6)
    for r in branch:
        r[2] /= zbase
        r[3] /= zbase
    for r in bus:
        r[2] /= 1e3
        r[3] /= 1e3
    return base, bus, gen, branch, gencost


def merge(t_base, t_bus, t_gen, t_branch, t_cost, feeder):
    f_base, f_bus, f_gen, f_branch, _ = feeder
    bus = [list(r) for r in t_bus]
    gen = [list(r) for r in t_gen]
    branch = [list(r[:13]) for r in t_branch]
    cost = [list(r) for r in t_cost]
    scale = t_base / f_base  # feeder impedances are p.u. on the feeder base
    regions = {int(r[0]): 0 for r in t_bus}
    for d, t_bus_id in enumerate(FEEDER_CONNECTIONS, start=1):
        ids = {}
        for r in f_bus:
            nr = list(r)
            nr[0] = d * FEEDER_OFFSET + int(r[0])
            ids[int(r[0])] = int(nr[0])
            if nr[1] == 3:
                # the feeder slack becomes an ordinary bus with feeder voltage limits
                nr[1] = 1
                nr[11], nr[12] = f_bus[1][11], f_bus[1][12]
            bus.append(nr)
            regions[int(nr[0])] = d
        for r in f_branch:
            if r[10] == 0:
                continue
            nr = list(r[:13])
            nr[0], nr[1] = ids[int(r[0])], ids[int(r[1])]
            nr[2] *= scale
            nr[3] *= scale
            nr[4] /= scale
            branch.append(nr)
        head = ids[int(f_gen[0][0])]
        branch.append([t_bus_id, head, TRAFO["r"], TRAFO["x"], TRAFO["b"], 0, 0, 0,
                       TRAFO["ratio"], TRAFO["angle"], 1, -360, 360])
    return t_base, bus, gen, branch, cost, regions


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src / "case57.m", dst / "case57.m")
    t_text = (src / "case57.m").read_text()

    feeder = convert_33bw((src / "case33bw.m").read_text())
    write_case(dst / "case33bw.m", "case33bw", *feeder[:1], feeder[1], feeder[2],
               feeder[3], feeder[4],
               ["CASE33BW  Baran & Wu 33-bus feeder (MATPOWER data).",
                "  Loads converted kW -> MW and impedances ohm -> p.u. on 10 MVA / 12.66 kV."])

    t = (read_base(t_text), read_matrix(t_text, "bus"), read_matrix(t_text, "gen"),
         read_matrix(t_text, "branch"), read_matrix(t_text, "gencost"))
    base, bus, gen, branch, cost, regions = merge(*t, feeder)
    write_case(dst / "itd_case.m", "itd_case", base, bus, gen, branch, cost,
               ["ITD_CASE  IEEE 57-bus transmission grid with two Baran & Wu 33-bus feeders.",
                "  Feeder d bus b is renumbered to 100*d + b; its slack generator is removed and",
                "  the head bus takes the feeder voltage limits and is fed from transmission buses %s through a transformer"
                % ", ".join(map(str, FEEDER_CONNECTIONS)),
                "  (r=%(r)g, x=%(x)g, b=%(b)g, ratio=%(ratio)g). Generated by tools/prepare_cases.py." % TRAFO])
    with open(dst / "itd_regions.txt", "w") as f:
        f.write("# bus_id region_id\n")
        for b in sorted(regions):
            f.write(f"{b} {regions[b]}\n")


if __name__ == "__main__":
    main()
