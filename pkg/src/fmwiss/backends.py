"""Foundation-model backends: adapters that serve dense features, text
embeddings, and per-seed attention stacks.

Backends must be deterministic: the same (image, query) yields the same
tensors. Three families ship here or in `synthetic`:

  * synthetic  - procedural features derived from hidden ground truth
                 (see `fmwiss.synthetic`), used by tests and toy runs;
  * dir        - precomputed per-image .npy files plus a text.json map;
  * http       - remote service speaking the float32 plane format.
"""

import json
import os
import urllib.error
import urllib.request

import numpy as np

from .coseg import decode_float_planes, encode_float_planes
from .errors import BackendFailure

TIMEOUT_ENV = "FMWISS_BACKEND_TIMEOUT_MS"
DEFAULT_TIMEOUT_MS = 10_000


def backend_timeout_s():
    raw = os.environ.get(TIMEOUT_ENV, "")
    try:
        ms = int(raw) if raw else DEFAULT_TIMEOUT_MS
    except ValueError:
        ms = DEFAULT_TIMEOUT_MS
    return max(ms, 1) / 1000.0


class VlpBackend:
    """Vision-language side: dense image features plus text embeddings."""

    kind = "vlp"

    def image_features(self, image_id, image):
        raise NotImplementedError

    def embed_text(self, text):
        raise NotImplementedError

    def class_name(self, class_id):
        raise NotImplementedError


class SslBackend:
    """Self-supervised side: attention stack for a query pixel."""

    kind = "ssl"

    def attention(self, image_id, image, seed):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# directory-backed adapters


class DirVlpBackend(VlpBackend):
    """Reads features/<id>.npy (h, w, d) and text.json {prompt: [d floats]}."""

    def __init__(self, root, class_names=None):
        self.root = root
        self._names = {int(k): v for k, v in (class_names or {}).items()}
        text_path = os.path.join(root, "text.json")
        try:
            with open(text_path, "r", encoding="utf-8") as fh:
                self._text = json.load(fh)
        except OSError as exc:
            raise BackendFailure(f"cannot read {text_path}: {exc}", endpoint=root)

    def image_features(self, image_id, image):
        path = os.path.join(self.root, "features", f"{image_id}.npy")
        try:
            return np.load(path)
        except OSError as exc:
            raise BackendFailure(f"missing feature file {path}: {exc}", endpoint=self.root)

    def embed_text(self, text):
        if text not in self._text:
            raise BackendFailure(f"prompt {text!r} not precomputed", endpoint=self.root)
        return np.asarray(self._text[text], dtype=np.float64)

    def class_name(self, class_id):
        return self._names.get(int(class_id), f"class {class_id}")


class DirSslBackend(SslBackend):
    """Reads attn/<id>.npy shaped (h, w, n_heads, h, w): stack per query."""

    def __init__(self, root):
        self.root = root
        self._cache = {}

    def attention(self, image_id, image, seed):
        if image_id not in self._cache:
            path = os.path.join(self.root, "attn", f"{image_id}.npy")
            try:
                self._cache[image_id] = np.load(path)
            except OSError as exc:
                raise BackendFailure(f"missing attention file {path}: {exc}", endpoint=self.root)
        arr = self._cache[image_id]
        i, j = seed
        return np.asarray(arr[i, j], dtype=np.float64)


# ---------------------------------------------------------------------------
# http adapters
#
# Requests carry the image encoded as float32 planes (C=3); responses are
# float32 planes as well. Text responses are 1 x 1 x d.


def _post(url, body, timeout):
    req = urllib.request.Request(url, data=body, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            if resp.status != 200:
                raise BackendFailure(f"{url} returned HTTP {resp.status}", endpoint=url)
            return resp.read()
    except urllib.error.URLError as exc:
        raise BackendFailure(f"cannot reach {url}: {exc}", endpoint=url)
    except TimeoutError as exc:
        raise BackendFailure(f"timeout talking to {url}: {exc}", endpoint=url)


def _image_body(image):
    return encode_float_planes(np.asarray(image, dtype=np.float32))


class HttpVlpBackend(VlpBackend):
    def __init__(self, base_url, class_names=None):
        self.base_url = base_url.rstrip("/")
        self._names = {int(k): v for k, v in (class_names or {}).items()}

    def image_features(self, image_id, image):
        data = _post(f"{self.base_url}/features?id={image_id}", _image_body(image), backend_timeout_s())
        return decode_float_planes(data)

    def embed_text(self, text):
        data = _post(f"{self.base_url}/text", text.encode("utf-8"), backend_timeout_s())
        planes = decode_float_planes(data)
        return planes.reshape(-1)

    def class_name(self, class_id):
        return self._names.get(int(class_id), f"class {class_id}")


class HttpSslBackend(SslBackend):
    def __init__(self, base_url):
        self.base_url = base_url.rstrip("/")

    def attention(self, image_id, image, seed):
        i, j = seed
        url = f"{self.base_url}/attention?id={image_id}&i={i}&j={j}"
        data = _post(url, _image_body(image), backend_timeout_s())
        planes = decode_float_planes(data)  # (h, w, n_heads)
        return np.moveaxis(planes, 2, 0)
