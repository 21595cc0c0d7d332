import argparse
import sys


def main(argv=None):
    ap = argparse.ArgumentParser(prog="clip-oracle",
                                 description="vision-language loss oracle (stdio protocol v1)")
    ap.add_argument("--encoder", choices=["pretrained", "seeded"], default="pretrained",
                    help="seeded = deterministic random weights, no downloads")
    ap.add_argument("--model", default=None, help="pretrained checkpoint identifier")
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--list-prompts", action="store_true",
                    help="print the candidate prompt pairs and exit")
    sub = ap.add_subparsers(dest="command")
    sw = sub.add_parser("sweep", help="emit the prompt-correlation CSV for a degradation sweep")
    sw.add_argument("--out", required=True)
    sw.add_argument("--steps", type=int, default=12)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--image", default=None,
                    help="base image (.npy float HWC); default: bundled synthetic image")
    args = ap.parse_args(argv)

    if args.list_prompts:
        from .prompts import PROMPT_PAIRS
        for i, (pos, neg) in enumerate(PROMPT_PAIRS, start=1):
            print(f'{i}: +"{pos}"  -"{neg}"')
        return 0

    from .encoder import DEFAULT_MODEL_ID, Encoder
    encoder = Encoder(mode=args.encoder, model_id=args.model or DEFAULT_MODEL_ID,
                      device=args.device)

    if args.command == "sweep":
        import numpy as np

        from .sweep import run_sweep, synthetic_test_image
        base = np.load(args.image) if args.image else synthetic_test_image(seed=args.seed)
        n = run_sweep(encoder, base.astype(np.float32), args.steps, args.out,
                      seed=args.seed)
        print(f"wrote {n} sweep rows to {args.out}", file=sys.stderr)
        return 0

    from .server import serve
    return serve(encoder)


if __name__ == "__main__":
    sys.exit(main())
