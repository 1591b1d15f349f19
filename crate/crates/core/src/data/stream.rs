use super::Dataset;
use crate::error::{FusionError, Result};

/// Tasks of consecutive class ids; each task lists its sample indices in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStream {
    pub tasks: Vec<Vec<usize>>,
    pub task_classes: Vec<Vec<usize>>,
    pub classes_per_task: usize,
}

impl ClassStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

pub fn make_class_stream(dataset: &Dataset, classes_per_task: usize) -> Result<ClassStream> {
    let classes = dataset.class_count();
    if classes_per_task == 0 || !classes.is_multiple_of(classes_per_task) {
        return Err(FusionError::Contract(format!(
            "{classes} classes cannot be split into tasks of {classes_per_task}"
        )));
    }
    let n_tasks = classes / classes_per_task;
    let mut tasks = vec![Vec::new(); n_tasks];
    for (i, &label) in dataset.labels().iter().enumerate() {
        tasks[label / classes_per_task].push(i);
    }
    let task_classes = (0..n_tasks)
        .map(|t| (t * classes_per_task..(t + 1) * classes_per_task).collect())
        .collect();
    Ok(ClassStream {
        tasks,
        task_classes,
        classes_per_task,
    })
}
