/**
 * Thin client for the failscope service, protocol v1.
 *
 * All failures surface as ApiError carrying the service's error envelope
 * (code/message/retryable). Busy conflicts (409 + retryable) are retried
 * with linear backoff before giving up. Remote explorations come back as
 * 202 + job; runExploration polls the status URL at the service-suggested
 * interval until the job settles.
 */

import type {
  BoardExport,
  ErrorEnvelope,
  ExplorationResponse,
  GroupDoc,
  ImageDoc,
  InstanceDoc,
  JobDoc,
  MetricDoc,
  ModelDoc,
  PersonaDoc,
  RecoveryMechanismDoc,
  ScenarioDoc,
  SuggestionDoc,
} from './types.js';

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly retryable: boolean;

  constructor(status: number, code: string, message: string, retryable: boolean) {
    super(message);
    this.name = 'ApiError';
    this.status = status;
    this.code = code;
    this.retryable = retryable;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;
export type SleepFn = (ms: number) => Promise<void>;

const defaultSleep: SleepFn = (ms) => new Promise((resolve) => setTimeout(resolve, ms));

export interface ClientOptions {
  fetchFn?: FetchLike;
  sleepFn?: SleepFn;
  busyRetries?: number;
  busyBackoffMs?: number;
}

interface AnnotationInput {
  label: string;
  box: { x_min: number; y_min: number; x_max: number; y_max: number };
}

export class ApiClient {
  readonly baseUrl: string;
  private readonly fetchFn: FetchLike;
  private readonly sleepFn: SleepFn;
  private readonly busyRetries: number;
  private readonly busyBackoffMs: number;

  constructor(baseUrl: string, options: ClientOptions = {}) {
    this.baseUrl = baseUrl.replace(/\/$/, '');
    this.fetchFn = options.fetchFn ?? ((url, init) => fetch(url, init));
    this.sleepFn = options.sleepFn ?? defaultSleep;
    this.busyRetries = options.busyRetries ?? 3;
    this.busyBackoffMs = options.busyBackoffMs ?? 250;
  }

  // ---------------------------------------------------------------- core

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { 'content-type': 'application/json' };
      init.body = JSON.stringify(body);
    }

    let attempt = 0;
    for (;;) {
      const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
      if (resp.ok) {
        return (await resp.json()) as T;
      }
      const err = await errorFromResponse(resp);
      if (err.retryable && attempt < this.busyRetries) {
        attempt += 1;
        await this.sleepFn(this.busyBackoffMs * attempt);
        continue;
      }
      throw err;
    }
  }

  private get<T>(path: string): Promise<T> {
    return this.request<T>('GET', path);
  }

  // ---------------------------------------------------------------- catalog

  listTaxonomy(level?: string): Promise<{ entries: Array<Record<string, string>> }> {
    const query = level ? `?level=${encodeURIComponent(level)}` : '';
    return this.get(`/v1/catalog/taxonomy${query}`);
  }

  listRecoveries(): Promise<{ mechanisms: RecoveryMechanismDoc[] }> {
    return this.get('/v1/catalog/recoveries');
  }

  // ---------------------------------------------------------------- project

  createProject(projectId: string): Promise<unknown> {
    return this.request('POST', '/v1/projects', { project_id: projectId });
  }

  listPersonas(project: string): Promise<{ personas: PersonaDoc[] }> {
    return this.get(`/v1/projects/${project}/personas`);
  }

  createPersona(project: string, name: string, description = ''): Promise<{ persona: PersonaDoc }> {
    return this.request('POST', `/v1/projects/${project}/personas`, { name, description });
  }

  listScenarios(project: string): Promise<{ scenarios: ScenarioDoc[] }> {
    return this.get(`/v1/projects/${project}/scenarios`);
  }

  createScenario(
    project: string,
    personaId: string,
    description = '',
  ): Promise<{ scenario: ScenarioDoc }> {
    return this.request('POST', `/v1/projects/${project}/scenarios`, {
      persona_id: personaId,
      description,
    });
  }

  listImages(project: string): Promise<{ images: ImageDoc[] }> {
    return this.get(`/v1/projects/${project}/images`);
  }

  imageContentUrl(project: string, imageId: string): string {
    return `${this.baseUrl}/v1/projects/${project}/images/${imageId}/content`;
  }

  listModels(project: string): Promise<{ models: ModelDoc[] }> {
    return this.get(`/v1/projects/${project}/models`);
  }

  // ---------------------------------------------------------------- exploration

  async runExploration(
    project: string,
    body: {
      image_id: string;
      model_id: string;
      persona_id: string;
      scenario_id: string;
      annotations: AnnotationInput[];
    },
  ): Promise<ExplorationResponse> {
    const first = await this.request<ExplorationResponse | JobDoc>(
      'POST',
      `/v1/projects/${project}/explorations`,
      body,
    );
    if (!isJobDoc(first)) {
      return first;
    }
    let job = first;
    while (job.status === 'pending') {
      await this.sleepFn(job.poll_interval_ms ?? 500);
      job = await this.get<JobDoc>(
        job.status_url ?? `/v1/projects/${project}/explorations/${job.job_id}`,
      );
    }
    if (job.status === 'failed' || job.result === undefined) {
      const err = job.error ?? { code: 'backend', message: 'exploration failed', retryable: false };
      throw new ApiError(502, err.code, err.message, err.retryable);
    }
    return job.result;
  }

  listInstances(project: string): Promise<{ instances: InstanceDoc[] }> {
    return this.get(`/v1/projects/${project}/instances`);
  }

  setSeverity(project: string, instanceId: string, severity: number): Promise<{ instance: InstanceDoc }> {
    if (!Number.isInteger(severity)) {
      throw new TypeError(`severity must be an integer, got ${severity}`);
    }
    return this.request('PATCH', `/v1/projects/${project}/instances/${instanceId}/severity`, {
      severity,
    });
  }

  requestPrompts(
    project: string,
    imageId: string,
    modelId: string,
  ): Promise<{ suggestions: SuggestionDoc[]; notices: string[] }> {
    return this.request('POST', `/v1/projects/${project}/prompts`, {
      image_id: imageId,
      model_id: modelId,
    });
  }

  // ---------------------------------------------------------------- board

  createGroup(project: string, name: string): Promise<{ group: GroupDoc }> {
    return this.request('POST', `/v1/projects/${project}/groups`, { name });
  }

  listGroups(project: string): Promise<{ groups: GroupDoc[] }> {
    return this.get(`/v1/projects/${project}/groups`);
  }

  patchGroup(
    project: string,
    groupId: string,
    patch: { name?: string; recovery_note?: string; suggested_mechanisms?: string[] },
  ): Promise<{ group: GroupDoc }> {
    return this.request('PATCH', `/v1/projects/${project}/groups/${groupId}`, patch);
  }

  addGroupMember(
    project: string,
    groupId: string,
    instanceId: string,
    position: [number, number],
  ): Promise<{ group: GroupDoc }> {
    return this.request('POST', `/v1/projects/${project}/groups/${groupId}/members`, {
      instance_id: instanceId,
      position,
    });
  }

  setMemberPosition(
    project: string,
    groupId: string,
    instanceId: string,
    x: number,
    y: number,
  ): Promise<{ group: GroupDoc }> {
    return this.request(
      'PATCH',
      `/v1/projects/${project}/groups/${groupId}/members/${instanceId}/position`,
      { x, y },
    );
  }

  getMetrics(project: string, axis: string): Promise<{ axis: string; reports: MetricDoc[] }> {
    return this.get(`/v1/projects/${project}/metrics?axis=${encodeURIComponent(axis)}`);
  }

  exportBoard(project: string): Promise<BoardExport> {
    return this.get(`/v1/projects/${project}/export`);
  }
}

function isJobDoc(doc: ExplorationResponse | JobDoc): doc is JobDoc {
  return typeof (doc as JobDoc).job_id === 'string' && 'status' in doc;
}

async function errorFromResponse(resp: Response): Promise<ApiError> {
  try {
    const envelope = (await resp.json()) as ErrorEnvelope;
    if (envelope && envelope.error) {
      return new ApiError(
        resp.status,
        envelope.error.code,
        envelope.error.message,
        envelope.error.retryable,
      );
    }
  } catch {
    // non-JSON body; fall through
  }
  return new ApiError(resp.status, `http_${resp.status}`, resp.statusText || 'request failed', false);
}

export type { AnnotationInput };
