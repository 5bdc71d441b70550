# coding: utf-8

# # The command line, end to end
#
# Writes a tiny two-class corpus of tones, then drives `pipmn` the way a user
# would: extract features, train, evaluate, predict.

import json
import os
import tempfile

import numpy as np

from pipmn import dsp
from pipmn.cli import main

tmp = tempfile.mkdtemp(prefix="pipmn_demo_")
rate = dsp.SAMPLE_RATE
t = np.arange(4 * rate) / rate
rows = ["clip_id,file_path,labels"]
for i in range(10):
    label, freq = ("low", 300 + 25 * i) if i % 2 == 0 else ("high", 3000 + 60 * i)
    dsp.write_wav(os.path.join(tmp, f"c{i}.wav"), 0.3 * np.sin(2 * np.pi * freq * t), rate)
    rows.append(f"c{i},c{i}.wav,{label}")
manifest = os.path.join(tmp, "manifest.csv")
with open(manifest, "w") as fh:
    fh.write("\n".join(rows) + "\n")

cache = os.path.join(tmp, "cache")
main(["features", "--manifest", manifest, "--cache-dir", cache])
main(["features", "--manifest", manifest, "--cache-dir", cache])   # warm: nothing extracted

config = os.path.join(tmp, "config.json")
with open(config, "w") as fh:
    json.dump({"manifest": manifest, "cache_dir": cache, "num_classes": 2,
               "epochs": 5, "batch_size": 8}, fh)

run = os.path.join(tmp, "run")
main(["train", "--config", config, "--out", run])
main(["eval", "--checkpoint", os.path.join(run, "checkpoint.pipc"), "--split", "test"])

dsp.write_wav(os.path.join(tmp, "probe.wav"), 0.3 * np.sin(2 * np.pi * 320 * np.arange(9 * rate) / rate), rate)
main(["predict", "--checkpoint", os.path.join(run, "checkpoint.pipc"),
      "--wav", os.path.join(tmp, "probe.wav")])
print("artifacts in", tmp)
