"""CartPole with a single optical unit trained by PIB plus a TD term."""

import argparse

from pib.config import default_rl_network, default_rl_train
from pib.rl import RlConfig, train_rl_agent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--random-policy", action="store_true", help="control arm: act uniformly at random")
    args = ap.parse_args()

    for seed in args.seeds:
        rl = RlConfig(seed=seed, episodes=args.episodes)
        if args.random_policy:
            rl = RlConfig(seed=seed, episodes=args.episodes, eps_start=1.0, eps_end=1.0, stop_when_solved=False)
        result = train_rl_agent(default_rl_network(rl.encoder_bins), rl, default_rl_train(seed), log=print)
        print(f"seed {seed}: solved at episode {result.solved_episode}, "
              f"best running average {max(result.running_average):.1f}")


if __name__ == "__main__":
    main()
