/**
 * Exploration view rendering: failure cards, tags, severity sliders, and
 * the disaggregated metrics table.
 *
 * Tags are taken verbatim from the service report. There is deliberately
 * no geometry or classification logic in here; if the service called a
 * pair FD, the card says FD, full stop.
 */

import { fromBoxArray, toPixels } from './annotate.js';
import { colorForObject, tagKind, tagTooltip } from './colors.js';
import type {
  AnnotationDoc,
  ExplorationResponse,
  InstanceDoc,
  MetricDoc,
  PredictedObjectDoc,
} from './types.js';

export const SCHEMA_VERSION = 1;

// thumbnail canvas size, px; boxes are projected onto this
const THUMB_W = 160;
const THUMB_H = 120;

export interface FailureCardView {
  instanceId: string;
  mode: string;
  tags: string[]; // mode + distribution + warnings, in render order
  severity: number;
  annotationId: string | null;
  predictionId: string | null;
}

export interface ExplorationViewState {
  cards: FailureCardView[];
  imageWarnings: string[];
  error: string | null;
}

export interface RenderOptions {
  imageUrl?: string;
  onSeverity?: (instanceId: string, severity: number) => void;
}

function esc(s: string): string {
  const d = document.createElement('div');
  d.textContent = s;
  return d.innerHTML;
}

// ---------------------------------------------------------------- tags

function tagElement(tag: string): HTMLSpanElement {
  const span = document.createElement('span');
  span.className = `tag tag-${tagKind(tag)}`;
  span.dataset.tag = tag;
  span.title = tagTooltip(tag);
  span.textContent = tag;
  return span;
}

function instanceTags(instance: InstanceDoc): string[] {
  const tags: string[] = [instance.mode];
  if (instance.distribution) tags.push(instance.distribution);
  tags.push(...instance.warnings);
  return tags;
}

// ---------------------------------------------------------------- thumbnails

function boxOverlay(
  objectId: string,
  label: string,
  box: [number, number, number, number],
): HTMLDivElement {
  const px = toPixels(fromBoxArray(box), THUMB_W, THUMB_H);
  const div = document.createElement('div');
  div.className = 'box-overlay';
  div.dataset.objectId = objectId;
  div.style.left = `${px.left}px`;
  div.style.top = `${px.top}px`;
  div.style.width = `${px.width}px`;
  div.style.height = `${px.height}px`;
  div.style.borderColor = colorForObject(objectId);
  div.title = label;
  return div;
}

function thumbnail(
  side: 'expectation' | 'prediction',
  imageUrl: string | undefined,
  overlays: HTMLDivElement[],
): HTMLDivElement {
  const thumb = document.createElement('div');
  thumb.className = `thumb thumb-${side}`;
  thumb.style.width = `${THUMB_W}px`;
  thumb.style.height = `${THUMB_H}px`;
  if (imageUrl) thumb.style.backgroundImage = `url(${imageUrl})`;
  for (const overlay of overlays) thumb.appendChild(overlay);
  return thumb;
}

// ---------------------------------------------------------------- cards

function severitySlider(
  instance: InstanceDoc,
  onSeverity?: (instanceId: string, severity: number) => void,
): HTMLLabelElement {
  const wrap = document.createElement('label');
  wrap.className = 'severity';
  wrap.innerHTML = `severity <output>${instance.severity}</output>`;
  const slider = document.createElement('input');
  slider.type = 'range';
  slider.min = '1';
  slider.max = '7';
  slider.step = '1';
  slider.value = String(instance.severity);
  slider.addEventListener('change', () => {
    const value = parseInt(slider.value, 10);
    wrap.querySelector('output')!.textContent = String(value);
    if (onSeverity) onSeverity(instance.instance_id, value);
  });
  wrap.appendChild(slider);
  return wrap;
}

function failureCard(
  instance: InstanceDoc,
  annotation: AnnotationDoc | undefined,
  predicted: PredictedObjectDoc | undefined,
  options: RenderOptions,
): HTMLDivElement {
  const card = document.createElement('div');
  card.className = 'failure-card';
  card.dataset.instanceId = instance.instance_id;

  const expectationBoxes = annotation
    ? [boxOverlay(annotation.id, annotation.label, annotation.box)]
    : [];
  const predictionBoxes = predicted
    ? [boxOverlay(predicted.id, `${predicted.label} (${predicted.score.toFixed(2)})`, predicted.box)]
    : [];
  const thumbs = document.createElement('div');
  thumbs.className = 'thumb-pair';
  thumbs.appendChild(thumbnail('expectation', options.imageUrl, expectationBoxes));
  thumbs.appendChild(thumbnail('prediction', options.imageUrl, predictionBoxes));
  card.appendChild(thumbs);

  const tagRow = document.createElement('div');
  tagRow.className = 'tag-row';
  for (const tag of instanceTags(instance)) tagRow.appendChild(tagElement(tag));
  if (instance.pair_iou !== null) {
    const iou = document.createElement('span');
    iou.className = 'pair-iou';
    iou.textContent = `IoU ${instance.pair_iou.toFixed(2)}`;
    tagRow.appendChild(iou);
  }
  card.appendChild(tagRow);
  card.appendChild(severitySlider(instance, options.onSeverity));

  // hovering a card highlights its paired prediction box
  card.addEventListener('mouseenter', () => setHighlight(card, true));
  card.addEventListener('mouseleave', () => setHighlight(card, false));
  return card;
}

function setHighlight(card: HTMLElement, on: boolean): void {
  for (const overlay of card.querySelectorAll<HTMLElement>('.box-overlay')) {
    overlay.classList.toggle('highlight', on);
  }
}

// ---------------------------------------------------------------- exploration view

/**
 * Render an exploration response into `container`, replacing its content.
 * The DOM is built detached and swapped in at the end, so a mid-render
 * failure (schema mismatch, malformed doc) leaves the previous content
 * intact and shows only an error banner.
 */
export function renderExploration(
  container: HTMLElement,
  response: ExplorationResponse,
  options: RenderOptions = {},
): ExplorationViewState {
  if (response.schema_version !== SCHEMA_VERSION) {
    const banner = document.createElement('div');
    banner.className = 'banner banner-error';
    banner.textContent =
      `unsupported response version ${response.schema_version} ` +
      `(this client speaks ${SCHEMA_VERSION})`;
    container.replaceChildren(banner);
    return { cards: [], imageWarnings: [], error: banner.textContent };
  }

  const root = document.createElement('div');
  root.className = 'exploration';

  for (const warning of response.report.image_warnings) {
    const banner = document.createElement('div');
    banner.className = 'banner banner-warning';
    banner.dataset.tag = warning;
    banner.title = tagTooltip(warning);
    banner.textContent = `${warning}: ${tagTooltip(warning)}`;
    root.appendChild(banner);
  }

  const annotationsById = new Map(response.annotations.map((a) => [a.id, a]));
  const objectsById = new Map(response.prediction.objects.map((o) => [o.id, o]));

  const cardList = document.createElement('div');
  cardList.className = 'card-list';
  const cards: FailureCardView[] = [];
  for (const instance of response.report.instances) {
    if (instance.mode === 'CD') continue;
    const annotation = instance.annotation_id
      ? annotationsById.get(instance.annotation_id)
      : undefined;
    const predicted = instance.prediction_id
      ? objectsById.get(instance.prediction_id)
      : undefined;
    cardList.appendChild(failureCard(instance, annotation, predicted, options));
    cards.push({
      instanceId: instance.instance_id,
      mode: instance.mode,
      tags: instanceTags(instance),
      severity: instance.severity,
      annotationId: instance.annotation_id,
      predictionId: instance.prediction_id,
    });
  }
  if (cards.length === 0) {
    const empty = document.createElement('div');
    empty.className = 'empty-state';
    empty.textContent = 'No failures: every annotation matched with the right label.';
    cardList.appendChild(empty);
  }
  root.appendChild(cardList);

  if (response.suggestions.length > 0) {
    const list = document.createElement('ul');
    list.className = 'suggestions';
    for (const s of response.suggestions) {
      const item = document.createElement('li');
      item.dataset.strategy = s.strategy;
      item.innerHTML = `<span class="strategy">${esc(s.strategy)}</span> ${esc(s.text)} <span class="rationale">${esc(s.rationale)}</span>`;
      list.appendChild(item);
    }
    root.appendChild(list);
  }
  for (const notice of response.notices) {
    const div = document.createElement('div');
    div.className = 'notice';
    div.textContent = notice;
    root.appendChild(div);
  }

  container.replaceChildren(root);
  return { cards, imageWarnings: [...response.report.image_warnings], error: null };
}

// ---------------------------------------------------------------- metrics table

const MODE_COLUMNS = ['CD', 'FD', 'MD', 'UD'] as const;
const DIST_COLUMNS = ['ID', 'OOD'] as const;
const WARN_COLUMNS = ['FTD', 'CQS', 'CQB'] as const;

/** Fixed column order: modes, then distribution, then warnings. */
export function renderMetricsTable(container: HTMLElement, reports: MetricDoc[]): void {
  const table = document.createElement('table');
  table.className = 'metrics';
  const columns = [...MODE_COLUMNS, ...DIST_COLUMNS, ...WARN_COLUMNS];
  const head = document.createElement('tr');
  head.innerHTML =
    '<th>group</th><th>instances</th>' +
    columns.map((c) => `<th title="${esc(tagTooltip(c))}">${c}</th>`).join('');
  table.appendChild(head);

  for (const report of reports) {
    const row = document.createElement('tr');
    const cells = [
      `<td>${esc(report.group)}</td>`,
      `<td>${report.totals.instances}</td>`,
      ...MODE_COLUMNS.map(
        (c) => `<td>${report.mode_counts[c]} (${report.mode_percent[c]}%)</td>`,
      ),
      ...DIST_COLUMNS.map(
        (c) => `<td>${report.distribution_counts[c]} (${report.distribution_percent[c]}%)</td>`,
      ),
      ...WARN_COLUMNS.map(
        (c) => `<td>${report.warning_counts[c]} (${report.warning_percent[c]}%)</td>`,
      ),
    ];
    row.innerHTML = cells.join('');
    table.appendChild(row);
  }
  container.replaceChildren(table);
}
