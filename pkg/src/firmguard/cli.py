"""Command line: ``firmguard run|resume|export|compare|metrics|triage``.

Exit codes: 0 converged, 2 budget exhausted, 3 needs human, 1 failed or error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import filelock

from firmguard import campaign as cp
from firmguard.metrics import summarize_campaign
from firmguard.model import load_threat_model


def _report(state: cp.CampaignState) -> int:
    print(f"campaign {state.name}: {state.status.value} after {len(state.iterations)} iteration(s)")
    if state.diagnostic:
        print(f"  {state.diagnostic}")
    if state.iterations and state.iterations[-1].metrics is not None:
        m = state.iterations[-1].metrics
        vrr = "baseline" if m.vrr is None else f"{m.vrr:.2f}%"
        print(f"  VRR {vrr}  TMCS {m.tmcs:.2f}%  SCI {m.sci:.4f}")
    print(f"  state digest {state.digest()}")
    return state.exit_code


def cmd_run(args) -> int:
    config = cp.CampaignConfig.load(args.config)
    return _report(cp.run_campaign(config, args.root))


def cmd_resume(args) -> int:
    return _report(cp.resume(args.campaign))


def cmd_export(args) -> int:
    state = cp.load_state(args.campaign)
    manifest = cp.export_dataset(state, args.out, force=args.force)
    print(f"exported {len(manifest['files'])} files for {len(manifest['iterations'])} iteration(s) to {args.out}")
    return 0


def cmd_compare(args) -> int:
    base = cp.CampaignConfig.load(args.config)
    slugs = [s.strip() for s in args.variants.split(",") if s.strip()]
    unknown = [s for s in slugs if s not in cp.VARIANTS]
    if unknown:
        print(f"unknown variant(s): {', '.join(unknown)}; choose from {', '.join(cp.VARIANTS)}", file=sys.stderr)
        return 1
    configs = [base.variant(cp.VARIANTS[s], f"{base.name}-{s}") for s in slugs]
    result = cp.compare_configurations(configs, args.out)
    sys.stdout.write(result.artifacts.table)
    print(f"comparison written to {Path(args.out) / 'comparison'}")
    return 0


def cmd_metrics(args) -> int:
    state = cp.load_state(args.campaign)
    if not state.iterations:
        print("campaign has no iterations", file=sys.stderr)
        return 1
    if args.iteration is None:
        model = load_threat_model(state.root / "threat_model.toml")
        config = cp.load_campaign_config(state.root)
        snap = summarize_campaign(state.iterations, model, config.metrics)
    else:
        if not 0 <= args.iteration < len(state.iterations):
            print(f"no iteration {args.iteration}", file=sys.stderr)
            return 1
        snap = state.iterations[args.iteration].metrics
    print(json.dumps(snap.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_triage(args) -> int:
    entry = cp.triage(args.campaign, args.finding_id, args.status, args.note)
    print(f"{entry['finding-id']} marked {entry['status']} (iteration {entry['iteration']}); resume to continue")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="firmguard", description="Iterative LLM firmware hardening campaigns.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="start a campaign from a config file")
    s.add_argument("config", type=Path)
    s.add_argument("--root", type=Path, default=Path("campaign"), help="campaign root directory (default: ./campaign)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("resume", help="continue a running or needs-human campaign")
    s.add_argument("campaign", type=Path, help="campaign directory (<root>/<name>)")
    s.set_defaults(func=cmd_resume)

    s = sub.add_parser("export", help="export the campaign dataset")
    s.add_argument("campaign", type=Path)
    s.add_argument("out", type=Path)
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("compare", help="run agent-configuration variants and tabulate them")
    s.add_argument("config", type=Path)
    s.add_argument("--variants", default="llm-only,all-agents", help=f"comma list from: {', '.join(cp.VARIANTS)}")
    s.add_argument("--out", type=Path, default=Path("comparison"))
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("metrics", help="print a metrics snapshot as JSON")
    s.add_argument("campaign", type=Path)
    s.add_argument("--iteration", type=int, help="one iteration instead of the campaign summary")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("triage", help="mark a finding accepted-risk or fixed with a note")
    s.add_argument("campaign", type=Path)
    s.add_argument("finding_id")
    s.add_argument("--status", required=True, choices=["accepted-risk", "fixed"])
    s.add_argument("--note", required=True)
    s.set_defaults(func=cmd_triage)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except filelock.Timeout:
        print("firmguard: campaign directory is locked by another process", file=sys.stderr)
        return 1
    except (cp.CampaignError, FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"firmguard: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
