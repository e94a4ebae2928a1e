/* tslint:disable */
/* eslint-disable */

/**
 * Barycenter of two planar classes on a fixed grid.
 */
export function barycenter(tau: number, separation: number, seed: bigint): string;

/**
 * Defense-only epochs on two planar classes, with the attacker's accuracy before and after.
 */
export function defend(epochs: number, step: number, seed: bigint): string;

/**
 * Entropic plan between two random clouds, next to the exact optimum.
 */
export function transport(n: number, m: number, epsilon: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly barycenter: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly defend: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly transport: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
