"""
LMM Client Module - External multimodal language model integration
Sends a {"system", "user"} request and reads back {"text"}.

Tests mock these classes; no real model is ever contacted offline.
"""

import json
import logging
import subprocess
from typing import List, Optional

import requests

from services.errors import ClientError

logger = logging.getLogger(__name__)


class LmmClient:
    """
    HTTP transport to a multimodal language model server.
    """

    def __init__(self, endpoint: str, timeout: float = 60.0, api_key: Optional[str] = None):
        """
        Args:
            endpoint: URL accepting POSTed {"system", "user"} JSON
            timeout: seconds before the request is abandoned
            api_key: optional bearer token
        """
        self.endpoint = endpoint
        self.timeout = timeout
        self.api_key = api_key

    def complete(self, system: str, user: str) -> str:
        """
        Send one request and return the response text.

        Raises:
            ClientError: on transport failure or a malformed response
        """
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            response = requests.post(
                self.endpoint,
                json={"system": system, "user": user},
                headers=headers,
                timeout=self.timeout,
            )
            response.raise_for_status()
            payload = response.json()
        except (requests.RequestException, ValueError) as e:
            raise ClientError(f"LMM request failed: {e}") from e

        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise ClientError("LMM response has no 'text' field.")
        return text


class SubprocessLmmClient:
    """
    Subprocess transport: writes one JSON object per line to the command's
    stdin and reads one JSON object from its stdout.
    """

    def __init__(self, command: List[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout

    def complete(self, system: str, user: str) -> str:
        request = json.dumps({"system": system, "user": user}) + "\n"
        try:
            result = subprocess.run(
                self.command, input=request, capture_output=True, text=True,
                timeout=self.timeout, check=True,
            )
        except (OSError, subprocess.SubprocessError) as e:
            raise ClientError(f"LMM subprocess failed: {e}") from e

        lines = [line for line in result.stdout.splitlines() if line.strip()]
        if not lines:
            raise ClientError("LMM subprocess produced no output.")
        try:
            payload = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise ClientError(f"LMM subprocess wrote invalid JSON: {e.msg}") from e
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise ClientError("LMM response has no 'text' field.")
        return text


def make_lmm_client(endpoint: Optional[str], command: Optional[List[str]] = None, timeout: float = 60.0):
    """Build the configured transport, or None when neither is set."""
    if command:
        return SubprocessLmmClient(command, timeout=timeout)
    if endpoint:
        return LmmClient(endpoint, timeout=timeout)
    return None
