// Browser wiring: poll the pending queue every 2s, render the discrepancy
// view for the selected inspection, submit feedback, and chart the selected
// run's loss series live via long-polled events.

import { ConsoleClient } from './api'
import { buildDiscrepancyView, type DiscrepancyView } from './discrepancy'
import {
  applyServerResult,
  initFeedbackForm,
  setBreakIndex,
  submissionPayload,
  validateForm,
  type FeedbackFormState,
} from './form'
import { buildLossChart, renderLossChartSVG } from './losschart'
import type { PendingInspectionData } from './types'

const POLL_INTERVAL_MS = 2000

const client = new ConsoleClient('')

let pending: PendingInspectionData[] = []
let view: DiscrepancyView | null = null
let form: FeedbackFormState | null = null
let selectedRun: string | null = null
let lastSeq = -1

function el(id: string): HTMLElement {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing element #${id}`)
  return node
}

function escapeHtml(text: string): string {
  return text.replace(/[&<>"]/g, (c) => ({ '&': '&amp;', '<': '&lt;', '>': '&gt;', '"': '&quot;' }[c]!))
}

function renderPendingList(): void {
  const target = el('pending-list')
  if (pending.length === 0) {
    target.innerHTML = '<p class="muted">no pending inspections</p>'
    return
  }
  target.innerHTML = pending
    .map(
      (entry) =>
        `<button class="pending-item" data-id="${entry.inspection_id}">` +
        `${escapeHtml(entry.run_id)} · ${escapeHtml(entry.inspection_id)}</button>`,
    )
    .join('')
  for (const button of Array.from(target.querySelectorAll('button'))) {
    button.addEventListener('click', () => selectInspection(button.dataset.id!))
  }
}

function selectInspection(inspectionId: string): void {
  const entry = pending.find((p) => p.inspection_id === inspectionId)
  if (!entry) return
  view = buildDiscrepancyView(entry.packet)
  form = initFeedbackForm(entry.packet)
  selectedRun = entry.run_id
  lastSeq = -1
  renderView()
  void refreshChart()
}

function renderView(): void {
  const target = el('discrepancy')
  if (!view || !form) {
    target.innerHTML = '<p class="muted">select a pending inspection</p>'
    return
  }
  const stale = !pending.some((p) => p.inspection_id === view!.inspectionId)
  const rows = view.rows
    .map((row) => {
      const classes = ['row', `sev-${row.severityClass}`, row.isComputedBreak ? 'computed-break' : '']
      return (
        `<tr class="${classes.join(' ').trim()}" data-index="${row.index}">` +
        `<td>${row.index}${row.isComputedBreak ? ' ◄ break' : ''}</td>` +
        `<td>${escapeHtml(row.plannedLabel ?? '—')}</td>` +
        `<td>${escapeHtml(row.executedLabel ?? '(not executed)')}</td>` +
        `<td>${escapeHtml(row.outcomeStatus ?? '')}</td>` +
        `<td class="payload">${escapeHtml((row.outcomePayload ?? '').slice(0, 160))}</td>` +
        `<td>${row.severity}</td></tr>`
      )
    })
    .join('')
  const constraints = view.constraints
    .map((c) => `<li class="verdict-${c.verdict}">${c.symbol} ${c.id} (${c.kind}): ${escapeHtml(c.description)}</li>`)
    .join('')
  target.innerHTML = `
    ${stale ? '<div class="banner">this packet is stale (run advanced); view is read-only — refresh to continue</div>' : ''}
    <h3>${escapeHtml(view.goalText)}</h3>
    <p>goal_loss ${view.summary.goalLoss.toFixed(3)} · divergence ${view.summary.divergence.toFixed(3)} ·
       tool calls ${view.summary.cost} · billed tokens ${view.summary.billedTokens}</p>
    <ul class="constraints">${constraints}</ul>
    <table class="diff"><thead><tr>
      <th>#</th><th>planned</th><th>executed</th><th>status</th><th>outcome</th><th>severity</th>
    </tr></thead><tbody>${rows}</tbody></table>
    <form id="feedback-form" ${stale ? 'data-readonly="true"' : ''}>
      <label>observed failure <textarea name="observed">${escapeHtml(form.observedFailure)}</textarea></label>
      <label>downstream manifestation <textarea name="downstream">${escapeHtml(form.downstreamManifestation)}</textarea></label>
      <label>repair instruction <textarea name="repair">${escapeHtml(form.repairInstruction)}</textarea></label>
      <label>earliest break index
        <input name="breakIndex" type="number" min="0" max="${Math.max(0, form.traceLen - 1)}" value="${form.breakIndex}">
        <span class="muted">${form.confirmedComputedBreak ? 'confirming computed break' : 'override'}</span>
      </label>
      <label>goal score override (optional) <input name="goal" value="${escapeHtml(form.goalScoreRaw)}"></label>
      <button type="submit" ${stale || form.resolved ? 'disabled' : ''}>submit feedback</button>
      <p id="form-error" class="error">${escapeHtml(form.error ?? '')}</p>
    </form>`
  const formEl = el('feedback-form') as HTMLFormElement
  formEl.addEventListener('submit', (event) => {
    event.preventDefault()
    void submit(formEl)
  })
}

async function submit(formEl: HTMLFormElement): Promise<void> {
  if (!form) return
  const data = new FormData(formEl)
  form = {
    ...form,
    observedFailure: String(data.get('observed') ?? ''),
    downstreamManifestation: String(data.get('downstream') ?? ''),
    repairInstruction: String(data.get('repair') ?? ''),
    goalScoreRaw: String(data.get('goal') ?? ''),
  }
  form = setBreakIndex(form, Number(data.get('breakIndex')))
  const problems = validateForm(form)
  if (problems.length > 0) {
    form = { ...form, error: problems.join('; ') }
    renderView()
    return
  }
  const result = await client.submitFeedback(form.inspectionId, submissionPayload(form))
  form = applyServerResult(form, result.status, result.detail)
  if (result.ok) {
    await refreshPending()
  }
  renderView()
}

async function refreshPending(): Promise<void> {
  try {
    pending = await client.listPending()
  } catch {
    return // service briefly unreachable; keep the last snapshot
  }
  renderPendingList()
}

async function refreshChart(): Promise<void> {
  if (!selectedRun) return
  try {
    const series = await client.getLossSeries(selectedRun)
    el('chart').innerHTML = renderLossChartSVG(buildLossChart(series))
    const run = await client.getRun(selectedRun)
    el('run-status').textContent = `${selectedRun}: ${run.status}` +
      (run.goal_score !== null ? ` · goal ${run.goal_score}` : '')
  } catch {
    // run may not exist yet
  }
}

async function watchEvents(): Promise<void> {
  // long-poll upgrade: when a run is selected, wait on its event stream
  for (;;) {
    if (!selectedRun) {
      await new Promise((resolve) => setTimeout(resolve, POLL_INTERVAL_MS))
      continue
    }
    try {
      const batch = await client.getEvents(selectedRun, lastSeq, 20)
      if (batch.events.length > 0) {
        lastSeq = batch.events[batch.events.length - 1]!.seq
        await refreshChart()
      }
      if (batch.status === 'finished' || batch.status === 'failed') {
        await refreshChart()
        await new Promise((resolve) => setTimeout(resolve, POLL_INTERVAL_MS))
      }
    } catch {
      await new Promise((resolve) => setTimeout(resolve, POLL_INTERVAL_MS))
    }
  }
}

export function start(): void {
  void refreshPending()
  setInterval(() => void refreshPending(), POLL_INTERVAL_MS)
  void watchEvents()
  renderView()
}

if (typeof document !== 'undefined' && document.getElementById('pending-list')) {
  start()
}
