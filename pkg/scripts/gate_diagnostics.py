"""How often the threshold gate drops the injected noisy sentences of training bags."""

import argparse

import numpy as np

from fgsi import autodiff as ad
from fgsi.corpus import SynthConfig, build_bags, generate_synthetic
from fgsi.model import BatchLayout
from fgsi.pipeline import desk_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--beta", type=float, default=0.0)
    args = ap.parse_args()

    synth = SynthConfig(seed=args.seed, noise_rate=args.noise)
    train_set, _, truth = generate_synthetic(synth)
    run = train(desk_config(seed=args.seed, epochs=args.epochs, beta=args.beta), train_set, words=synth.words())
    model = run.model
    noisy_of = {id(inst): flag for inst, flag in zip(train_set, truth.train_noisy_flags)}
    bags = build_bags(train_set)
    prepared = model.prepare(bags)
    with ad.no_grad():
        res = model.forward(BatchLayout.stack(prepared), [p.gold for p in prepared])
    flags = np.array([noisy_of[id(i)] for b in bags for i in b.instances])
    kept = np.zeros(len(flags), dtype=bool)
    kept[res.survivors] = True
    print(f"noisy sentences kept: {kept[flags].mean():.3f} of {flags.sum()}")
    print(f"clean sentences kept: {kept[~flags].mean():.3f} of {(~flags).sum()}")
    print(f"bags that fell back to their best sentence: {res.fallback.mean():.3f}")


if __name__ == "__main__":
    main()
