"""Chat-completion HTTP client shared by agent and designer backends."""
from __future__ import annotations

import os

import httpx


class BackendError(RuntimeError):
    pass


class ChatClient:
    """POST {"model", "messages"} and return choices[0].message.content.

    The bearer token is read from ``token_env`` at call time.
    """

    def __init__(self, endpoint: str, model: str, token_env: str = "SKILLTOPO_API_TOKEN",
                 timeout: float = 60.0, transport: httpx.BaseTransport | None = None) -> None:
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self._transport = transport

    def complete(self, content: str, system: str | None = None) -> str:
        messages = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": content})
        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                resp = client.post(self.endpoint, json={"model": self.model, "messages": messages},
                                   headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"chat completion failed: {exc}") from exc
