"""Checkpoint directories: one STI1 tensor per parameter plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

from .. import diffcore
from ..diffcore import Tensor
from .config import ModelConfig
from .params import PatientEmbeddings, is_patient_specific


def _file(name: str) -> str:
    return name.replace("/", "__") + ".sti"


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor],
                    embeddings: dict[str, PatientEmbeddings] | None = None,
                    extra: dict | None = None) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        diffcore.save(d / _file(name), params[name].data)
        entries.append({"name": name, "file": _file(name), "shared": not is_patient_specific(name)})
    for pid, emb in sorted((embeddings or {}).items()):
        for key, t in (("V", emb.V), ("g", emb.g)):
            name = f"emb/{pid}/{key}"
            diffcore.save(d / _file(name), t.data)
            entries.append({"name": name, "file": _file(name), "shared": False})
    manifest = {"config": config.to_json(), "quantiles": config.quantiles,
                "parameters": entries, "extra": extra or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Returns (config, shared params, embeddings by patient id, extra)."""
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text())
    config = ModelConfig.from_json(manifest["config"])
    params: dict[str, Tensor] = {}
    emb_parts: dict[str, dict[str, Tensor]] = {}
    for e in manifest["parameters"]:
        data = diffcore.load(d / e["file"])
        name = e["name"]
        if name.startswith("emb/"):
            _, pid, key = name.split("/")
            emb_parts.setdefault(pid, {})[key] = Tensor(data, requires_grad=True, name=f"emb/{key}")
        else:
            params[name] = Tensor(data, requires_grad=True, name=name)
    embeddings = {pid: PatientEmbeddings(v["V"], v["g"]) for pid, v in emb_parts.items()}
    return config, params, embeddings, manifest.get("extra", {})
