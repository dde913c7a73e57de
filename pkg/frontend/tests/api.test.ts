import { readFileSync } from 'node:fs';
import { join } from 'node:path';
import { describe, expect, it } from 'vitest';

import { ApiClient, ApiError, type FetchLike } from '../src/api.js';
import type { ExplorationResponse } from '../src/types.js';

const BASE = 'http://svc.test:8321';

function loadTaxi(): ExplorationResponse {
  const file = join(process.cwd(), 'tests', 'fixtures', 'taxi_exploration.json');
  return JSON.parse(readFileSync(file, 'utf8')) as ExplorationResponse;
}

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'content-type': 'application/json' },
  });
}

function envelope(code: string, message: string, retryable: boolean) {
  return { schema_version: 1, error: { code, message, retryable } };
}

interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

/** Fetch stub that replays a scripted queue of responses. */
function scriptedFetch(script: Array<() => Response>) {
  const calls: RecordedCall[] = [];
  const fetchFn: FetchLike = (url, init) => {
    calls.push({
      url,
      method: init?.method ?? 'GET',
      body: typeof init?.body === 'string' ? JSON.parse(init.body) : undefined,
    });
    const next = script.shift();
    if (!next) throw new Error(`unscripted request: ${url}`);
    return Promise.resolve(next());
  };
  return { fetchFn, calls };
}

function client(script: Array<() => Response>, sleeps?: number[]) {
  const { fetchFn, calls } = scriptedFetch(script);
  const api = new ApiClient(BASE, {
    fetchFn,
    sleepFn: (ms) => {
      sleeps?.push(ms);
      return Promise.resolve();
    },
    busyBackoffMs: 10,
  });
  return { api, calls };
}

const taxiBody = {
  image_id: 'img-0001',
  model_id: 'det-mock',
  persona_id: 'pe-0001',
  scenario_id: 'sc-0001',
  annotations: [
    { label: 'taxi', box: { x_min: 0.2, y_min: 0.3, x_max: 0.7, y_max: 0.8 } },
  ],
};

describe('request plumbing', () => {
  it('returns parsed JSON bodies and hits versioned paths', async () => {
    const groups = { schema_version: 1, groups: [] };
    const { api, calls } = client([() => jsonResponse(200, groups)]);
    expect(await api.listGroups('demo')).toEqual(groups);
    expect(calls[0].url).toBe(`${BASE}/v1/projects/demo/groups`);
    expect(calls[0].method).toBe('GET');
  });

  it('surfaces the service error envelope as ApiError', async () => {
    const { api } = client([
      () => jsonResponse(404, envelope('not_found', 'no such project', false)),
    ]);
    const err = await api.listGroups('nope').catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    const apiErr = err as ApiError;
    expect(apiErr.status).toBe(404);
    expect(apiErr.code).toBe('not_found');
    expect(apiErr.message).toBe('no such project');
    expect(apiErr.retryable).toBe(false);
  });

  it('falls back to an http_<status> code for non-JSON error bodies', async () => {
    const { api } = client([() => new Response('boom', { status: 500 })]);
    const err = (await api.listGroups('demo').catch((e: unknown) => e)) as ApiError;
    expect(err.code).toBe('http_500');
    expect(err.status).toBe(500);
  });

  it('retries busy responses with linear backoff, then succeeds', async () => {
    const busy = () => jsonResponse(409, envelope('busy', 'store is busy', true));
    const sleeps: number[] = [];
    const { api, calls } = client(
      [busy, busy, () => jsonResponse(200, { schema_version: 1, groups: [] })],
      sleeps,
    );
    await api.listGroups('demo');
    expect(calls.length).toBe(3);
    expect(sleeps).toEqual([10, 20]);
  });

  it('gives up after the retry budget and rethrows the busy error', async () => {
    const busy = () => jsonResponse(409, envelope('busy', 'store is busy', true));
    const sleeps: number[] = [];
    const { api, calls } = client([busy, busy, busy, busy], sleeps);
    const err = (await api.listGroups('demo').catch((e: unknown) => e)) as ApiError;
    expect(err.code).toBe('busy');
    expect(calls.length).toBe(4); // first try + 3 retries
    expect(sleeps).toEqual([10, 20, 30]);
  });

  it('does not retry non-retryable errors', async () => {
    const { api, calls } = client([
      () => jsonResponse(422, envelope('invalid_request', 'bad box', false)),
    ]);
    await expect(api.listGroups('demo')).rejects.toMatchObject({ code: 'invalid_request' });
    expect(calls.length).toBe(1);
  });
});

describe('explorations', () => {
  it('passes synchronous exploration responses straight through', async () => {
    const fixture = loadTaxi();
    const { api, calls } = client([() => jsonResponse(200, fixture)]);
    const result = await api.runExploration('demo', taxiBody);
    expect(result).toEqual(fixture);
    expect(calls.length).toBe(1);
    expect(calls[0].method).toBe('POST');
    expect(calls[0].url).toBe(`${BASE}/v1/projects/demo/explorations`);
    expect(calls[0].body).toEqual(taxiBody);
  });

  it('polls a 202 job at the suggested interval until it is done', async () => {
    const fixture = loadTaxi();
    const job = (status: string, extra: object = {}) => ({
      schema_version: 1,
      job_id: 'job-0001',
      status,
      status_url: '/v1/projects/demo/explorations/job-0001',
      poll_interval_ms: 500,
      ...extra,
    });
    const sleeps: number[] = [];
    const { api, calls } = client(
      [
        () => jsonResponse(202, job('pending')),
        () => jsonResponse(200, job('pending')),
        () => jsonResponse(200, job('done', { result: fixture })),
      ],
      sleeps,
    );
    const result = await api.runExploration('demo', taxiBody);
    expect(result).toEqual(fixture);
    expect(sleeps).toEqual([500, 500]);
    expect(calls.map((c) => c.method)).toEqual(['POST', 'GET', 'GET']);
    expect(calls[1].url).toBe(`${BASE}/v1/projects/demo/explorations/job-0001`);
  });

  it('falls back to the canonical job path when no status_url is given', async () => {
    const fixture = loadTaxi();
    const sleeps: number[] = [];
    const { api, calls } = client(
      [
        () =>
          jsonResponse(202, {
            schema_version: 1,
            job_id: 'job-0002',
            status: 'pending',
          }),
        () =>
          jsonResponse(200, {
            schema_version: 1,
            job_id: 'job-0002',
            status: 'done',
            result: fixture,
          }),
      ],
      sleeps,
    );
    await api.runExploration('demo', taxiBody);
    expect(sleeps).toEqual([500]); // default poll interval
    expect(calls[1].url).toBe(`${BASE}/v1/projects/demo/explorations/job-0002`);
  });

  it('turns a failed job into an ApiError carrying the job error', async () => {
    const { api } = client([
      () =>
        jsonResponse(202, {
          schema_version: 1,
          job_id: 'job-0003',
          status: 'failed',
          error: { code: 'backend', message: 'detector unreachable', retryable: false },
        }),
    ]);
    const err = (await api.runExploration('demo', taxiBody).catch((e: unknown) => e)) as ApiError;
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(502);
    expect(err.code).toBe('backend');
    expect(err.message).toBe('detector unreachable');
  });
});

describe('instance and board endpoints', () => {
  it('rejects non-integer severities before any request is made', () => {
    const { api, calls } = client([]);
    expect(() => api.setSeverity('demo', 'fi-0001', 3.5)).toThrow(TypeError);
    expect(calls.length).toBe(0);
  });

  it('sends severity patches to the instance path', async () => {
    const { api, calls } = client([() => jsonResponse(200, { schema_version: 1, instance: {} })]);
    await api.setSeverity('demo', 'fi-0001', 6);
    expect(calls[0].method).toBe('PATCH');
    expect(calls[0].url).toBe(`${BASE}/v1/projects/demo/instances/fi-0001/severity`);
    expect(calls[0].body).toEqual({ severity: 6 });
  });

  it('adds members with an explicit position pair', async () => {
    const { api, calls } = client([() => jsonResponse(200, { schema_version: 1, group: {} })]);
    await api.addGroupMember('demo', 'grp-0001', 'fi-0001', [16, 8]);
    expect(calls[0].body).toEqual({ instance_id: 'fi-0001', position: [16, 8] });
  });

  it('patches member positions with an {x, y} body', async () => {
    const { api, calls } = client([() => jsonResponse(200, { schema_version: 1, group: {} })]);
    await api.setMemberPosition('demo', 'grp-0001', 'fi-0001', 24, 32);
    expect(calls[0].method).toBe('PATCH');
    expect(calls[0].url).toBe(
      `${BASE}/v1/projects/demo/groups/grp-0001/members/fi-0001/position`,
    );
    expect(calls[0].body).toEqual({ x: 24, y: 32 });
  });

  it('builds image content URLs without fetching', () => {
    const { api, calls } = client([]);
    expect(api.imageContentUrl('demo', 'img-0001')).toBe(
      `${BASE}/v1/projects/demo/images/img-0001/content`,
    );
    expect(calls.length).toBe(0);
  });
});
