/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const barycenter: (a: number, b: number, c: bigint) => [number, number, number, number];
export const defend: (a: number, b: number, c: bigint) => [number, number, number, number];
export const transport: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
