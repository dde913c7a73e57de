/**
 * Application shell: wires the annotation canvas, exploration view,
 * metrics tabs, and synthesis board to the service client.
 *
 * Expects the element ids from index.html. Importing this module is
 * side-effect free until start() runs; the DOMContentLoaded hook only
 * fires when the shell markup is actually present.
 */

import type { AnnotationInput } from './api.js';
import { ApiClient, ApiError } from './api.js';
import { rectFromDrag, toBoxArray, toPixels } from './annotate.js';
import type { CanvasAnnotation, NormalizedRect } from './annotate.js';
import { BoardController, GRID_UNIT, zoomAt, screenToBoard, type Viewport } from './board.js';
import { colorForObject } from './colors.js';
import { renderExploration, renderMetricsTable } from './render.js';

const DEFAULT_BASE = `${location.protocol}//${location.hostname}:8321`;

// ------------------------------------------------------------------ state

interface AppState {
  project: string;
  personaId: string;
  scenarioId: string;
  imageId: string;
  modelId: string;
  annotations: CanvasAnnotation[];
  draft: NormalizedRect | null;
  viewport: Viewport;
}

const state: AppState = {
  project: 'demo',
  personaId: '',
  scenarioId: '',
  imageId: '',
  modelId: '',
  annotations: [],
  draft: null,
  viewport: { zoom: 1, panX: 0, panY: 0 },
};

let api: ApiClient;
let board: BoardController;

// ------------------------------------------------------------------ helpers

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

function setStatus(text: string, isError = false): void {
  const el = $('status');
  el.textContent = text;
  el.classList.toggle('error', isError);
}

function reportError(err: unknown): void {
  if (err instanceof ApiError) {
    const hint = err.retryable ? ' (busy; retried and gave up — try again)' : '';
    setStatus(`${err.code}: ${err.message}${hint}`, true);
  } else {
    setStatus(String(err), true);
  }
}

// ------------------------------------------------------------------ canvas

function redrawAnnotations(): void {
  const overlay = $('annotation-layer');
  overlay.innerHTML = '';
  const width = overlay.clientWidth;
  const height = overlay.clientHeight;
  const draw = (rect: NormalizedRect, label: string, cls: string, id: string) => {
    const px = toPixels(rect, width, height);
    const div = document.createElement('div');
    div.className = `box-overlay ${cls}`;
    div.style.left = `${px.left}px`;
    div.style.top = `${px.top}px`;
    div.style.width = `${px.width}px`;
    div.style.height = `${px.height}px`;
    div.style.borderColor = colorForObject(id);
    div.title = label;
    overlay.appendChild(div);
  };
  state.annotations.forEach((a, i) => draw(a.rect, a.label, 'committed', `ann-draft-${i}`));
  if (state.draft) draw(state.draft, '(draft)', 'draft', 'draft');
}

function wireCanvas(): void {
  const layer = $('annotation-layer');
  let start: [number, number] | null = null;

  layer.addEventListener('mousedown', (e) => {
    const rect = layer.getBoundingClientRect();
    start = [e.clientX - rect.left, e.clientY - rect.top];
  });
  layer.addEventListener('mousemove', (e) => {
    if (!start) return;
    const rect = layer.getBoundingClientRect();
    state.draft = rectFromDrag(
      start[0],
      start[1],
      e.clientX - rect.left,
      e.clientY - rect.top,
      layer.clientWidth,
      layer.clientHeight,
    );
    redrawAnnotations();
  });
  layer.addEventListener('mouseup', (e) => {
    if (!start) return;
    const rect = layer.getBoundingClientRect();
    const dragged = rectFromDrag(
      start[0],
      start[1],
      e.clientX - rect.left,
      e.clientY - rect.top,
      layer.clientWidth,
      layer.clientHeight,
    );
    start = null;
    state.draft = null;
    if (!dragged) {
      setStatus('drag was too small to make a box');
      redrawAnnotations();
      return;
    }
    const label = (($('label-input') as HTMLInputElement).value || '').trim();
    if (!label) {
      setStatus('type a label before drawing');
      redrawAnnotations();
      return;
    }
    state.annotations.push({ rect: dragged, label, state: 'committed' });
    setStatus(`annotated ${label}`);
    redrawAnnotations();
  });
}

// ------------------------------------------------------------------ exploration

async function explore(): Promise<void> {
  const annotations: AnnotationInput[] = state.annotations.map((a) => {
    const [x_min, y_min, x_max, y_max] = toBoxArray(a.rect);
    return { label: a.label, box: { x_min, y_min, x_max, y_max } };
  });
  setStatus('running exploration…');
  try {
    const response = await api.runExploration(state.project, {
      image_id: state.imageId,
      model_id: state.modelId,
      persona_id: state.personaId,
      scenario_id: state.scenarioId,
      annotations,
    });
    renderExploration($('exploration'), response, {
      imageUrl: api.imageContentUrl(state.project, state.imageId),
      onSeverity: (instanceId, severity) => {
        api.setSeverity(state.project, instanceId, severity).catch(reportError);
      },
    });
    setStatus(`explored: ${response.report.instances.length} instances`);
    await refreshMetrics();
  } catch (err) {
    reportError(err);
  }
}

async function refreshMetrics(): Promise<void> {
  const axis = ($('axis-select') as HTMLSelectElement).value || 'persona';
  try {
    const body = await api.getMetrics(state.project, axis);
    renderMetricsTable($('metrics'), body.reports);
  } catch (err) {
    reportError(err);
  }
}

// ------------------------------------------------------------------ board

function wireBoard(): void {
  const plane = $('board-plane');
  const surface = $('board-surface');

  const applyViewport = () => {
    surface.style.transform =
      `translate(${state.viewport.panX}px, ${state.viewport.panY}px) scale(${state.viewport.zoom})`;
  };

  plane.addEventListener('wheel', (e) => {
    e.preventDefault();
    const rect = plane.getBoundingClientRect();
    const factor = e.deltaY < 0 ? 1.1 : 1 / 1.1;
    state.viewport = zoomAt(
      state.viewport,
      e.clientX - rect.left,
      e.clientY - rect.top,
      state.viewport.zoom * factor,
    );
    applyViewport();
  });

  let panStart: { x: number; y: number; panX: number; panY: number } | null = null;
  plane.addEventListener('mousedown', (e) => {
    if (e.target !== plane && e.target !== surface) return;
    panStart = { x: e.clientX, y: e.clientY, panX: state.viewport.panX, panY: state.viewport.panY };
  });
  plane.addEventListener('mousemove', (e) => {
    if (!panStart) return;
    state.viewport.panX = panStart.panX + (e.clientX - panStart.x);
    state.viewport.panY = panStart.panY + (e.clientY - panStart.y);
    applyViewport();
  });
  plane.addEventListener('mouseup', () => {
    panStart = null;
  });

  $('export-button').addEventListener('click', async () => {
    try {
      const doc = await board.export();
      const blob = new Blob([JSON.stringify(doc, null, 2)], { type: 'application/json' });
      const a = document.createElement('a');
      a.href = URL.createObjectURL(blob);
      a.download = `${state.project}-board.json`;
      a.click();
      URL.revokeObjectURL(a.href);
    } catch (err) {
      reportError(err);
    }
  });
}

export function renderBoard(): void {
  const surface = $('board-surface');
  surface.innerHTML = '';
  for (const group of board.groups) {
    const div = document.createElement('div');
    div.className = 'board-group';
    div.dataset.groupId = group.group_id;
    div.innerHTML = `<h3>${group.name.replace(/</g, '&lt;')}</h3>`;
    for (const member of group.member_instance_ids) {
      const [x, y] = group.canvas_positions[member] ?? [0, 0];
      const card = document.createElement('div');
      card.className = 'board-card';
      card.dataset.instanceId = member;
      card.style.left = `${x}px`;
      card.style.top = `${y}px`;
      card.textContent = member;
      wireCardDrag(card, group.group_id, member);
      div.appendChild(card);
    }
    surface.appendChild(div);
  }
}

function wireCardDrag(card: HTMLElement, groupId: string, instanceId: string): void {
  card.addEventListener('mousedown', (e) => {
    e.stopPropagation();
    const plane = $('board-plane');
    const move = (ev: MouseEvent) => {
      const rect = plane.getBoundingClientRect();
      const [bx, by] = screenToBoard(state.viewport, ev.clientX - rect.left, ev.clientY - rect.top);
      card.style.left = `${bx}px`;
      card.style.top = `${by}px`;
    };
    const up = async (ev: MouseEvent) => {
      document.removeEventListener('mousemove', move);
      document.removeEventListener('mouseup', up);
      const rect = plane.getBoundingClientRect();
      const [bx, by] = screenToBoard(state.viewport, ev.clientX - rect.left, ev.clientY - rect.top);
      try {
        await board.moveCard(groupId, instanceId, bx, by);
        renderBoard();
      } catch (err) {
        reportError(err);
        await board.reload().then(renderBoard).catch(reportError);
      }
    };
    document.addEventListener('mousemove', move);
    document.addEventListener('mouseup', up);
  });
}

// ------------------------------------------------------------------ startup

export async function start(baseUrl = DEFAULT_BASE): Promise<void> {
  api = new ApiClient(baseUrl);
  board = new BoardController(api, state.project);

  wireCanvas();
  wireBoard();
  $('explore-button').addEventListener('click', () => void explore());
  $('axis-select').addEventListener('change', () => void refreshMetrics());
  $('clear-button').addEventListener('click', () => {
    state.annotations = [];
    redrawAnnotations();
  });

  setStatus(`ready (grid ${GRID_UNIT} board units)`);
}

if (typeof document !== 'undefined') {
  document.addEventListener('DOMContentLoaded', () => {
    if (document.getElementById('exploration')) void start();
  });
}
