//! Deterministic worker pool: fixed chunking by item index, results
//! merged back in index order, so the thread count never changes the
//! output.

pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> anyhow::Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> anyhow::Result<R> + Sync,
{
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    let chunk = items.len().div_ceil(workers);
    let mut slots: Vec<Option<anyhow::Result<R>>> = Vec::new();
    slots.resize_with(items.len(), || None);

    std::thread::scope(|scope| {
        for (ci, (item_chunk, slot_chunk)) in
            items.chunks(chunk).zip(slots.chunks_mut(chunk)).enumerate()
        {
            let f = &f;
            scope.spawn(move || {
                for (j, (item, slot)) in item_chunk.iter().zip(slot_chunk.iter_mut()).enumerate() {
                    *slot = Some(f(ci * chunk + j, item));
                }
            });
        }
    });

    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}
