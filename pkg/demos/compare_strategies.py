"""Train the ID-only baseline, the two-step model and the end-to-end model on
one synthetic corpus, then report validation and test NDCG@10.

Run: python demos/compare_strategies.py [--seed 0]   (about a minute)
"""
import argparse

from sicsrec.align import ContentEncoderHead, CosineDiscriminator, encode_content, run_sft, select_pairs
from sicsrec.data import Corpus, SynthSpec, synth_generate
from sicsrec.evaluate import evaluate
from sicsrec.seqmodel import ModelConfig
from sicsrec.training import TrainPlan, run_strategy, strategy_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    seed = args.seed

    cat, log_ = synth_generate(SynthSpec(seed=seed))
    corpus = Corpus(cat, log_)
    heads = ContentEncoderHead.init(cat.text_feat.shape[1], cat.image_feat.shape[1], 32, seed)
    run_sft(select_pairs(log_, cat, CosineDiscriminator(cat, 0.6)), cat, heads, seed=seed)
    et, ei = encode_content(cat, heads)

    cfg = ModelConfig(n=10, d=32, num_blocks=2, dropout=0.5, lora_rank=4, seed=seed)
    plan1 = TrainPlan(stage=1, batch_size=128, seed=seed)
    plan2 = TrainPlan(stage=2, batch_size=128, alpha=0.1, seed=seed)

    results = []
    for name in ("two-step", "end2end"):
        model, res = run_strategy(name, corpus, cfg, et, ei, plan1, plan2)
        results.append(res)
        test = evaluate(model, corpus.split, ks=(10,), mode="test").metrics["ndcg@10"]
        print(f"{name}: best val NDCG@10 {res.val_ndcg10:.4f} after {res.epochs_to_best} epochs, "
              f"test NDCG@10 {test:.4f}")
        if name == "two-step":
            print(f"  ID-only stage alone: best val NDCG@10 {res.reports[0]['best_metric']:.4f}")
    print()
    print(strategy_table(results))


if __name__ == "__main__":
    main()
