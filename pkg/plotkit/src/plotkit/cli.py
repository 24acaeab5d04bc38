"""plotkit command line: render or check one figure family.

Exit codes: 0 rendered (or check passed), 2 schema mismatch with the
missing pieces listed on stderr, 1 other validation errors.
"""

from __future__ import annotations

import argparse
import sys

from . import recipes


def build_parser():
    ap = argparse.ArgumentParser(prog="plotkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("render", help="render one figure family")
    r.add_argument("--family", required=True, choices=recipes.FAMILIES)
    r.add_argument("--artifact", help="harness artifact directory (default inputs)")
    r.add_argument("--input", nargs="*", default=None,
                   help="explicit input files (override the artifact defaults)")
    r.add_argument("--label", nargs="*", default=None,
                   help="legend labels matching --input order (bound family)")
    r.add_argument("--out", required=True, help="output base path (.png/.svg added)")
    r.add_argument("--title", default=None)
    r.add_argument("--check", action="store_true",
                   help="validate inputs without drawing")
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.input:
        recipe = recipes.FigureRecipe(family=args.family, inputs=list(args.input),
                                      output=args.out, title=args.title,
                                      labels=args.label or [])
    elif args.artifact:
        recipe = recipes.recipe_for_artifact(args.family, args.artifact, args.out,
                                             labels=args.label)
        if args.title:
            recipe.title = args.title
    else:
        print("error: need --artifact or --input", file=sys.stderr)
        return 1
    try:
        if args.check:
            recipes.check(recipe)
            print(f"{args.family}: inputs valid")
            return 0
        files = recipes.render(recipe)
    except recipes.SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
