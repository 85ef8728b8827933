"""HTTP POST with bounded retries and exponential backoff."""

from __future__ import annotations

import logging
import time

import requests

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0


class RequestFailed(Exception):
    """Request did not succeed within the retry budget."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


def post_json(
    url: str,
    payload: dict,
    timeout: float,
    max_retries: int,
    headers: dict | None = None,
    session: requests.Session | None = None,
    sleep=time.sleep,
) -> dict:
    """POST payload as JSON; retry on connection errors, timeouts and
    non-2xx responses. Raises RequestFailed with the last status/body."""
    post = (session or requests).post
    last: RequestFailed | None = None
    # max_retries counts retries after the first attempt
    attempts = max(1, max_retries + 1)
    for attempt in range(attempts):
        if attempt:
            sleep(BACKOFF_BASE_S * BACKOFF_FACTOR ** (attempt - 1))
        try:
            resp = post(url, json=payload, timeout=timeout, headers=headers)
        except requests.RequestException as exc:
            last = RequestFailed(f"POST {url} failed: {exc}")
            logger.debug("attempt %d/%d: %s", attempt + 1, attempts, exc)
            continue
        if resp.status_code // 100 == 2:
            try:
                return resp.json()
            except ValueError as exc:
                last = RequestFailed(f"POST {url}: invalid JSON response: {exc}")
                continue
        last = RequestFailed(
            f"POST {url}: status {resp.status_code}",
            status=resp.status_code,
            body=resp.text[:500],
        )
        logger.debug("attempt %d/%d: status %d", attempt + 1, attempts,
                     resp.status_code)
    assert last is not None
    raise last
