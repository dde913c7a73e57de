/**
 * Synthesis board: an infinite zoomable plane of failure cards that can be
 * dragged into named groups and annotated with recovery notes.
 *
 * Positions live in board units and snap to an 8-unit grid on drop. Every
 * mutation goes through the service (the client holds no authoritative
 * state); the view updates optimistically and reconciles with the
 * response, falling back to a reload on error.
 */

import type { ApiClient } from './api.js';
import type { BoardExport, GroupDoc } from './types.js';

export const GRID_UNIT = 8;

export const MIN_ZOOM = 0.1;
export const MAX_ZOOM = 5;

export interface Viewport {
  zoom: number;
  panX: number;
  panY: number;
}

export function snapToGrid(v: number): number {
  return Math.round(v / GRID_UNIT) * GRID_UNIT;
}

export function clampZoom(zoom: number): number {
  return Math.max(MIN_ZOOM, Math.min(MAX_ZOOM, zoom));
}

export function boardToScreen(view: Viewport, x: number, y: number): [number, number] {
  return [x * view.zoom + view.panX, y * view.zoom + view.panY];
}

export function screenToBoard(view: Viewport, x: number, y: number): [number, number] {
  return [(x - view.panX) / view.zoom, (y - view.panY) / view.zoom];
}

/**
 * Zoom about a fixed screen point: the board point under the cursor stays
 * under the cursor.
 */
export function zoomAt(view: Viewport, screenX: number, screenY: number, nextZoom: number): Viewport {
  const zoom = clampZoom(nextZoom);
  const [bx, by] = screenToBoard(view, screenX, screenY);
  return {
    zoom,
    panX: screenX - bx * zoom,
    panY: screenY - by * zoom,
  };
}

/**
 * Insert a recovery-mechanism suggestion into a group note. Existing text
 * is kept and the mechanism is appended on its own line (inserting never
 * replaces what the designer already wrote).
 */
export function appendRecoverySuggestion(note: string, mechanism: string): string {
  if (!note.trim()) return mechanism;
  return `${note.replace(/\n$/, '')}\n${mechanism}`;
}

// ---------------------------------------------------------------- service-backed ops

export class BoardController {
  private readonly api: ApiClient;
  private readonly project: string;
  groups: GroupDoc[] = [];

  constructor(api: ApiClient, project: string) {
    this.api = api;
    this.project = project;
  }

  async reload(): Promise<GroupDoc[]> {
    const body = await this.api.listGroups(this.project);
    this.groups = body.groups;
    return this.groups;
  }

  async createGroup(name: string): Promise<GroupDoc> {
    const body = await this.api.createGroup(this.project, name);
    this.groups.push(body.group);
    return body.group;
  }

  async rename(groupId: string, name: string): Promise<GroupDoc> {
    return this.reconcile(await this.api.patchGroup(this.project, groupId, { name }));
  }

  async setNote(groupId: string, recoveryNote: string): Promise<GroupDoc> {
    return this.reconcile(
      await this.api.patchGroup(this.project, groupId, { recovery_note: recoveryNote }),
    );
  }

  /** Append one mechanism to the group's note and persist the result. */
  async insertSuggestion(groupId: string, mechanism: string): Promise<GroupDoc> {
    const group = this.groups.find((g) => g.group_id === groupId);
    const note = appendRecoverySuggestion(group?.recovery_note ?? '', mechanism);
    const body = await this.api.patchGroup(this.project, groupId, {
      recovery_note: note,
      suggested_mechanisms: [...new Set([...(group?.suggested_mechanisms ?? []), mechanism])],
    });
    return this.reconcile(body);
  }

  /** Drop an instance onto a group at a board position (snapped). */
  async dropCard(groupId: string, instanceId: string, x: number, y: number): Promise<GroupDoc> {
    const body = await this.api.addGroupMember(this.project, groupId, instanceId, [
      snapToGrid(x),
      snapToGrid(y),
    ]);
    return this.reconcile(body);
  }

  /** Move an existing member; the next position is snapped too. */
  async moveCard(groupId: string, instanceId: string, x: number, y: number): Promise<GroupDoc> {
    const body = await this.api.setMemberPosition(
      this.project,
      groupId,
      instanceId,
      snapToGrid(x),
      snapToGrid(y),
    );
    return this.reconcile(body);
  }

  async export(): Promise<BoardExport> {
    return this.api.exportBoard(this.project);
  }

  private reconcile(body: { group: GroupDoc }): GroupDoc {
    const idx = this.groups.findIndex((g) => g.group_id === body.group.group_id);
    if (idx >= 0) this.groups[idx] = body.group;
    else this.groups.push(body.group);
    return body.group;
  }
}
