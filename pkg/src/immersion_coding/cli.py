"""Command-line entry points.

Every subcommand accepts ``--config FILE`` (JSON object whose keys are the
subcommand's long option names with dashes replaced by underscores); flags
given on the command line override the file.  ``--dump-config`` prints the
resolved configuration and exits.

Exit codes: 0 ok, 2 configuration, 3 numeric, 4 protocol.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import casestudy_control as cc
from . import casestudy_ml as cml
from .errors import ConfigError, ImmersionError, ProtocolError
from .privacy import Sensitivity, calibrate_sigma, privacy_report
from .protocol import (ClientSession, CloudService, LoopbackTransport, SocketTransport,
                       Transcript, find_plain_leaks, replay, run_session)
from .protocol.transport import CloudServer
from .scheme import (PRESETS, SchemeDims, SchemeScales, keygen, keygen_preset, load_scheme,
                     load_target_keys, save_scheme, save_target_keys)

logger = logging.getLogger("immersion_coding")

CASE_DIMS = {"reactor": cc.REACTOR_DIMS}


def _target_path(path):
    return Path(path).with_suffix(".target")


def _scales_and_sigma(args):
    scales, sigma = PRESETS[args.preset]
    if args.scales:
        scales = SchemeScales(*args.scales)
    if args.sigma is not None:
        sigma = args.sigma
    return scales, sigma


def cmd_keygen(args):
    if args.case:
        dims = CASE_DIMS[args.case]
    elif args.dims:
        dims = SchemeDims(*args.dims)
    else:
        raise ConfigError("give --dims or --case")
    scales, sigma = _scales_and_sigma(args)
    scheme = keygen(dims, scales, mu=args.mu, sigma=sigma, seed=args.seed)
    sens = Sensitivity(args.delta_y, args.delta_u)
    if args.eps_target:
        sigma = calibrate_sigma(scheme, sens.delta_y, sens.delta_u, *args.eps_target)
        # Same seed, so the matrices are unchanged; only sigma moves.
        scheme = keygen(dims, scales, mu=args.mu, sigma=sigma, seed=args.seed)
    save_scheme(scheme, args.out)
    save_target_keys(scheme.target_keys(), _target_path(args.out))
    rep = privacy_report(scheme, sens)
    Path(args.out).with_suffix(".report.txt").write_text(rep.to_text())
    print(f"scheme      {args.out}")
    print(f"target keys {_target_path(args.out)}")
    print(f"eps_y_max   {rep.eps_y_max:.6e}")
    print(f"eps_u_max   {rep.eps_u_max:.6e}")
    return 0


def cmd_privacy_report(args):
    scheme = load_scheme(args.scheme)
    rep = privacy_report(scheme, Sensitivity(args.delta_y, args.delta_u), args.sigma)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    sys.stdout.write(rep.to_text())
    return 0


def cmd_demo_control(args):
    params = cc.ReactorParams(dt=None if args.literal else args.dt)
    scheme = load_scheme(args.scheme) if args.scheme else \
        keygen_preset(cc.REACTOR_DIMS, args.preset, seed=args.seed)
    plain = cc.run_closed_loop(params, args.steps, "plain")
    service = CloudService(scheme.target_keys())
    enc = cc.run_closed_loop(params, args.steps, "encoded", scheme=scheme, service=service,
                             seed=args.seed)
    ratio = cc.export_figures_data(plain, enc, args.out)
    err = float(np.max(np.abs(plain.u - enc.u)))
    print(f"steps                 {args.steps}")
    print(f"max |u - u_hat|       {err:.3e}")
    print(f"max state gap         {np.max(np.abs(plain.x - enc.x)):.3e}")
    print(f"max |x| (plain)       {np.max(np.abs(plain.x)):.4f}")
    print(f"final x (plain)       {plain.x[-1, 0]:.3e} {plain.x[-1, 1]:.3e}")
    print(f"max immersion resid.  {np.max(enc.residuals):.3e}")
    print(f"runtime ratio         {ratio:.2f}  (encoded / plain)")
    print(f"csv                   {Path(args.out) / 'trajectory.csv'}")
    return 0


def cmd_demo_ml(args):
    cfg = cml.MLConfig(arch=args.arch, optimizer=args.optimizer, dataset=args.dataset,
                       n_records=args.records, hidden=args.hidden, batch_size=args.batch_size,
                       epochs=args.epochs, lr=args.lr, clip=args.clip, preset=args.preset,
                       extra=args.extra, seed=args.seed)
    res = cml.benchmark(cfg)
    res.write_csv(args.out)
    last = res.rows[-1]
    same = all(r["plain_acc"] == r["siml_acc"] for r in res.rows)
    print(f"model                 {cfg.arch} / {cfg.optimizer}")
    print(f"final accuracy        plain {last['plain_acc']:.4f}  encoded {last['siml_acc']:.4f}")
    print(f"per-epoch acc equal   {same}")
    print(f"max |w - w_siml|      {res.max_param_gap:.3e}")
    print(f"time ratio            {res.time_ratio:.2f}  (encoded / plain)")
    print(f"csv                   {args.out}")
    return 0


def cmd_serve(args):
    keys = load_target_keys(args.target_keys)
    server = CloudServer(CloudService(keys), args.host, args.port)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _read_inputs(path, n_y):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    head = rows[0]
    y_cols = [i for i, h in enumerate(head) if h.startswith("y")]
    w_cols = [i for i, h in enumerate(head) if h.startswith("w")]
    if len(y_cols) != n_y:
        raise ConfigError(f"{path} has {len(y_cols)} y columns, scheme expects {n_y}")
    out = []
    for r in rows[1:]:
        y = np.array([float(r[i]) for i in y_cols])
        w = np.array([float(r[i]) for i in w_cols]) if w_cols else None
        out.append((y, w))
    return out


def cmd_client(args):
    scheme = load_scheme(args.scheme)
    inputs = _read_inputs(args.inputs, scheme.dims.n_y)
    params = json.loads(args.params) if isinstance(args.params, str) else (args.params or {})
    if args.loopback:
        transport = LoopbackTransport(CloudService(scheme.target_keys()))
    else:
        transport = SocketTransport(args.host, args.port)
    client = ClientSession(scheme, seed=args.seed)
    us, transcript = run_session(client, transport, args.algorithm, inputs, params)
    if args.transcript:
        transcript.save(args.transcript)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"u_{i}" for i in range(us.shape[1])])
            for k, u in enumerate(us):
                w.writerow([k] + [repr(float(v)) for v in u])
    leaks = find_plain_leaks(transcript.to_bytes(), [y for y, _ in inputs] + list(us))
    print(f"steps                 {len(us)}")
    print(f"plain bytes in wire   {'none' if not leaks else leaks}")
    if args.transcript:
        print(f"transcript            {args.transcript}")
    return 0


def cmd_replay(args):
    transcript = Transcript.load(args.transcript)
    res = replay(transcript, CloudService(load_target_keys(args.target_keys)))
    print(f"exchanges             {res.exchanges}")
    print(f"mismatched replies    {len(res.mismatches)}")
    if not res.ok:
        raise ProtocolError(f"replay diverged at exchanges {res.mismatches}")
    return 0


def _common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--dump-config", action="store_true", help="print resolved options and exit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="immersion-coding", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="draw a scheme, write it and its privacy report")
    _common(p)
    p.add_argument("--dims", type=int, nargs=6,
                   metavar=("NY", "NU", "NZETA", "NTY", "NTU", "NTZETA"))
    p.add_argument("--case", choices=sorted(CASE_DIMS))
    p.add_argument("--preset", choices=sorted(PRESETS), default="strong")
    p.add_argument("--scales", type=float, nargs=4, metavar=("PI1", "PI2", "PI3", "PI4"))
    p.add_argument("--sigma", type=float)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--delta-y", type=float, default=1.0)
    p.add_argument("--delta-u", type=float, default=1.0)
    p.add_argument("--eps-target", type=float, nargs=2, metavar=("EPS_Y", "EPS_U"),
                   help="calibrate sigma to meet these per-row bounds")
    p.add_argument("--out", default="scheme.imk")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("privacy-report", help="per-row epsilon bounds of a scheme")
    _common(p)
    p.add_argument("--scheme", required=True)
    p.add_argument("--delta-y", type=float, default=1.0)
    p.add_argument("--delta-u", type=float, default=1.0)
    p.add_argument("--sigma", type=float)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_privacy_report)

    p = sub.add_parser("demo-control", help="reactor loop, plain vs encoded")
    _common(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--literal", action="store_true",
                   help="use the difference equations verbatim instead of Euler sampling")
    p.add_argument("--preset", choices=sorted(PRESETS), default="balanced")
    p.add_argument("--scheme")
    p.add_argument("--out", default="control_out")
    p.set_defaults(func=cmd_demo_control)

    p = sub.add_parser("demo-ml", help="plain vs encoded training")
    _common(p)
    p.add_argument("--arch", choices=["logistic", "mlp"], default="logistic")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--dataset", default="blobs", help="blobs, digits or a CSV path")
    p.add_argument("--records", type=int, default=400)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--clip", type=float, default=cml.DEFAULT_CLIP)
    p.add_argument("--preset", choices=sorted(PRESETS), default="balanced")
    p.add_argument("--extra", type=int, default=32, help="lift size added to each dimension")
    p.add_argument("--out", default="ml_metrics.csv")
    p.set_defaults(func=cmd_demo_ml)

    p = sub.add_parser("serve", help="cloud server over TCP")
    _common(p)
    p.add_argument("--target-keys", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7707)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="drive one session from an input CSV")
    _common(p)
    p.add_argument("--scheme", required=True)
    p.add_argument("--inputs", required=True, help="CSV with y_* (and optional w_*) columns")
    p.add_argument("--algorithm", default="echo")
    p.add_argument("--params", default="{}", help="algorithm parameters as JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7707)
    p.add_argument("--loopback", action="store_true", help="run the cloud in-process")
    p.add_argument("--transcript")
    p.add_argument("--out")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("replay", help="re-run a transcript against the cloud and compare bytes")
    _common(p)
    p.add_argument("--transcript", required=True)
    p.add_argument("--target-keys", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def _subparser(parser, command):
    sp = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return sp.choices.get(command)


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = _subparser(parser, argv[0]) if argv else None
    if known.config and sub is not None:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {known.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        options = {a.dest: a for a in sub._actions}
        unknown = set(cfg) - (set(options) - {"help", "config", "dump_config"})
        if unknown:
            raise ConfigError(f"unknown config keys for {argv[0]}: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        for dest in cfg:
            # Required options may come from the file.
            options[dest].required = False
    return parser.parse_args(argv)


def resolved_config(args):
    return {k: v for k, v in sorted(vars(args).items())
            if k not in ("func", "config", "dump_config", "verbose")}


def main(argv=None):
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.dump_config:
            print(json.dumps(resolved_config(args), indent=2))
            return 0
        return args.func(args)
    except ImmersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
