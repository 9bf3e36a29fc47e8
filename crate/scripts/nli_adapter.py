"""NLI adapter for the `subprocess` backend, built on Hugging Face transformers.

Reads one JSON request per line on stdin and writes one JSON response per
line on stdout (see crates/core/src/backend/subprocess.rs for the protocol).

    python3 scripts/nli_adapter.py --model roberta-large-mnli --device cuda

Entailment confidence for a hypothesis is the softmax over the model's
(contradiction, entailment) logits, dropping neutral. Fine-tuning trains the
full 3-way head with cross entropy, mapping pseudo-labels onto the model's
own entailment/contradiction label ids.
"""
import argparse
import json
import os
import random
import sys

import torch
from torch.nn.functional import cross_entropy
from transformers import AutoModelForSequenceClassification, AutoTokenizer


def label_id(config, name):
    for label, idx in config.label2id.items():
        if label.lower().startswith(name):
            return idx
    raise ValueError(f"model has no `{name}` label: {config.label2id}")


class Adapter:
    def __init__(self, model_name, device):
        self.base = model_name
        self.device = device
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.cache = {}

    def model(self, checkpoint):
        key = checkpoint or self.base
        if key not in self.cache:
            self.cache.clear()  # keep one model resident
            m = AutoModelForSequenceClassification.from_pretrained(key).to(self.device)
            m.eval()
            self.cache[key] = m
        return self.cache[key]

    def info(self):
        return {"unk_token": self.tokenizer.unk_token or "<unk>"}

    @torch.no_grad()
    def score(self, premise, hypotheses, checkpoint):
        model = self.model(checkpoint)
        entail = label_id(model.config, "entail")
        contra = label_id(model.config, "contra")
        enc = self.tokenizer([premise] * len(hypotheses), hypotheses, return_tensors="pt",
                             padding=True, truncation=True).to(self.device)
        logits = model(**enc).logits[:, [contra, entail]]
        return {"confidences": logits.softmax(dim=-1)[:, 1].tolist()}

    def fine_tune(self, req):
        spec = req["spec"]
        torch.manual_seed(req["seed"])
        rng = random.Random(req["seed"])
        with open(req["pairs"]) as f:
            pairs = [json.loads(line) for line in f if line.strip()]
        model = AutoModelForSequenceClassification.from_pretrained(req["checkpoint"] or self.base).to(self.device)
        self.cache.clear()
        targets = {"entail": label_id(model.config, "entail"), "contradict": label_id(model.config, "contra")}
        if spec.get("optimizer", "adamw") == "sgd":
            opt = torch.optim.SGD(model.parameters(), lr=spec["learning_rate"])
        else:
            opt = torch.optim.AdamW(model.parameters(), lr=spec["learning_rate"])
        model.train()
        bs = spec["batch_size"]
        for _ in range(spec["epochs"]):
            rng.shuffle(pairs)
            for i in range(0, len(pairs), bs):
                batch = pairs[i:i + bs]
                enc = self.tokenizer([p["premise"] for p in batch], [p["hypothesis"] for p in batch],
                                     return_tensors="pt", padding=True, truncation=True).to(self.device)
                labels = torch.tensor([targets[p["label"]] for p in batch], device=self.device)
                loss = cross_entropy(model(**enc).logits, labels)
                loss.backward()
                opt.step()
                opt.zero_grad()
        os.makedirs(req["output"], exist_ok=True)
        model.save_pretrained(req["output"])
        self.tokenizer.save_pretrained(req["output"])
        return {"checkpoint": req["output"]}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--model", required=True)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args()
    adapter = Adapter(args.model, args.device)
    for line in sys.stdin:
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "info":
                resp = adapter.info()
            elif op == "fine_tune":
                resp = adapter.fine_tune(req)
            elif op is None:
                resp = adapter.score(req["premise"], req["hypotheses"], req["checkpoint"])
            else:
                resp = {"error": f"unknown op {op}"}
        except Exception as e:  # keep serving; the caller decides what to do
            resp = {"error": f"{type(e).__name__}: {e}"}
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
