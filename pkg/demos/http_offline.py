"""Driving the HTTP backend against an in-process fake server.

The backend speaks the OpenAI-style ``/completions`` protocol: it appends each
label word to the prompt, asks for echoed log-probabilities and sums those of
the label tokens. This script plugs an ``httpx.MockTransport`` in place of the
network. The fake server's sentiment model counts happy and sad words but is
biased towards "positive", and it fails the first request with a 503 to show
the retry path. Pointing ``endpoint_url`` at a real server is the only change
needed for live use.

The fake server ignores the demonstrations, so the context-invariance term
would only reward overconfidence. The fit below switches it off. The six
demonstrations are perfectly separable, so the calibrated outputs come out sharp.

Run with ``python demos/http_offline.py``.
"""

import json

import httpx
import numpy as np

from supcal import (
    BackendConfig, EnsembleConfig, Exemplar, HTTPBackend, ObjectiveConfig, load_templates, predict, train_ensemble,
)

HAPPY = {"great", "lovely", "fun", "superb", "warm"}
SAD = {"dull", "awful", "slow", "bland", "cold"}


def fake_server():
    failures = [503]

    def handler(request):
        if failures:
            return httpx.Response(failures.pop(), json={"error": "warming up"})
        prompt = json.loads(request.content)["prompt"]
        cut = prompt.rfind("sentiment:") + len("sentiment:")
        head, label = prompt[:cut], prompt[cut:].strip()
        query = head.rsplit("sentence:", 1)[-1]
        words = set(query.lower().split())
        score = len(words & HAPPY) - len(words & SAD) + 1.5  # built-in positive bias
        logprob = -np.logaddexp(0.0, -score if label == "positive" else score)
        body = {"choices": [{"logprobs": {
            "tokens": [head, " " + label], "token_logprobs": [None, float(logprob)], "text_offset": [0, cut],
        }}]}
        return httpx.Response(200, json=body)

    return httpx.MockTransport(handler)


def main():
    template = load_templates()["sst2"]
    config = BackendConfig("http://localhost:8000/v1/completions", "toy-model")
    backend = HTTPBackend(config, template, client=httpx.Client(transport=fake_server()),
                          sleep=lambda s: print(f"  (retrying after {s:.2f}s)"))

    shots = [
        Exemplar(0, "a dull and slow film", 0), Exemplar(1, "great fun throughout", 1),
        Exemplar(2, "bland story", 0), Exemplar(3, "superb and warm", 1),
        Exemplar(4, "awful acting", 0), Exemplar(5, "cold dull script", 0),
    ]
    queries = ["slow", "lovely", "bland and cold", "plain"]

    model = train_ensemble(shots, backend, EnsembleConfig(i_max=2, m_i=4), ObjectiveConfig(lambda_inv=0.0))
    print(f"\n{backend.calls} scoring requests; trained sizes {model.sizes}\n")
    print(f"{'query':<16} raw P(positive)   calibrated P(positive)")
    for q in queries:
        raw = backend.infer(q)[1]
        cal = predict(model, q, backend)[1]
        print(f"{q:<16} {raw:>15.3f}   {cal:>22.3f}")


if __name__ == "__main__":
    main()
